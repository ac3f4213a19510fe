import sys

from pdwn.config import ArchConfig

# small enough that a training step takes a few milliseconds
TINY = ArchConfig(num_scales=2, channels=(4, 8), estimator_widths=(8, 8), cost_radius=(1, 1),
                  blend_width=4, context_width=4, context_blocks=1)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
