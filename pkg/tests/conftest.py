import numpy as np
import pytest

from amekd.distill import TrainConfig, init_models
from amekd.synthgen import ClassGeometry, TeacherModel, generate

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def record_criterion():
    def record(name: str, ok: bool, detail: str = ""):
        ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        return ok

    return record


def make_instance(seed: int, C: int = 4, d: int = 16, R: int = 8, batch: int = 8, **cfg_kw):
    """Dataset, teacher, randomly initialized models and a mixed-class batch."""
    data = generate(ClassGeometry(num_classes=C, embed_dim=d), 4, seed)
    teacher = TeacherModel.from_dataset(data)
    cfg = TrainConfig(manifold_dim=R, seed=seed, **cfg_kw)
    student, proj = init_models(teacher, cfg, np.random.default_rng([seed, 99]))
    rng = np.random.default_rng([seed, 5])
    idx = rng.choice(data.images.shape[0], size=min(batch, data.images.shape[0]), replace=False)
    return data, teacher, cfg, student, proj, data.images[idx]
