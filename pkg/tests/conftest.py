import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

_ACCEPTANCE: dict[str, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _ACCEPTANCE.setdefault(name, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, outcomes in _ACCEPTANCE.items():
        status = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        tr.write_line(f"{status}  {name}")


@pytest.fixture(scope="session")
def overfit_fold(tmp_path_factory):
    """A tiny detector trained to memorize its 8-image fold, saved with its config.

    Returns ``(fold_root, checkpoint_path, cfg, params)``.
    """
    from texforensics.detector import DetectorConfig, save_detector, train
    from texforensics.imaging import AugmentPolicy, save_png
    from texforensics.surrogate import make_surrogate
    from texforensics.texture import SmashConfig

    root = tmp_path_factory.mktemp("overfit")
    fold = root / "data" / "tiny"
    data = make_surrogate(8, 5, 32)
    for i, (img, label) in enumerate(data):
        sub = fold / ("1_fake" if label else "0_real")
        sub.mkdir(parents=True, exist_ok=True)
        save_png(img, sub / f"{i:03d}.png")
    cfg = DetectorConfig(smash=SmashConfig(8, 16, 4), augment=AugmentPolicy.disabled(), batch_size=8, epochs=200,
                         val_fraction=0.0)
    params = train(cfg, data).params
    ckpt = root / "tiny.ckpt"
    save_detector(ckpt, params, cfg)
    return root / "data", ckpt, cfg, params
