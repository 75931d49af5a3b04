import os

os.environ.setdefault("TAGTRACK_THREADS", "1")

import torch  # noqa: E402

torch.set_num_threads(int(os.environ["TAGTRACK_THREADS"]))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
