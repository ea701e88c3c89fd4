import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))  # make ``oracles`` importable

from rbmle.agents import admissible_threshold  # noqa: E402
from rbmle.harness.simulate import ground_truth  # noqa: E402

# bias scale used for the reference model: a fixed multiple of the admissibility threshold
BIAS_MULTIPLIER = 1.1


def admissible_a(model, multiplier=BIAS_MULTIPLIER):
    truth = ground_truth(model)
    return round(multiplier * admissible_threshold(model.num_states, model.num_actions, model.p_min, truth.gap_min), 6)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
