import numpy as np
import pytest

from bifocal.data import build_vocab, make_example, synth_generate, SynthConfig
from bifocal.model import Model, ModelConfig

TINY_SYNTH = SynthConfig(n_first=6, n_last=6, n_years=5, distractors=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_examples():
    return synth_generate(3, 12, TINY_SYNTH)


@pytest.fixture(scope="session")
def toy_vocab(toy_examples):
    return build_vocab(toy_examples)


@pytest.fixture
def fig1_example():
    return make_example([("name", "v. balakrishnan"), ("birth_date", "1943"),
                         ("fields", "particle physics , many-body theory")],
                        "v. balakrishnan ( born 1943 ) is an indian theoretical physicist .")


def tiny_model(vocab, scale=None, **overrides):
    cfg = dict(hidden=4, embed=3, seed=0)
    cfg.update(overrides)
    model = Model(ModelConfig(**cfg), vocab)
    if scale is not None:
        rng = np.random.default_rng(cfg["seed"] + 99)
        for name, t in model.params.items():
            t.data[...] = rng.uniform(-scale, scale, size=t.shape)
            if name.startswith("emb."):
                t.data[0] = 0.0
    return model


ALL_CONFIGS = [
    dict(),
    dict(gating_variant="prev"),
    dict(gating=False),
    dict(bifocal=False, gating=False),
    dict(gamma_mode="const"),
    dict(gate_input="pre"),
    dict(field_rep="name"),
    dict(field_rep="values", field_context=False),
]


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def model_gradient_error(model, batch, n: int = 50, seed: int = 0) -> float:
    """Worst finite-difference relative error of the full loss over ``n`` random coordinates.

    The PAD rows of the embedding tables are frozen constants and are not sampled.
    """
    from bifocal.autodiff import finite_diff_check
    from bifocal.training import batch_loss

    rng = np.random.default_rng(seed)
    names = sorted(model.params)
    sizes = np.array([model.params[k].data.size for k in names], float)
    picks: dict[str, set] = {}
    while sum(len(v) for v in picks.values()) < n:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        data = model.params[name].data
        i = int(rng.integers(data.size))
        if name.startswith("emb.") and i < data.shape[1]:
            continue
        picks.setdefault(name, set()).add(i)
    worst = 0.0
    for name, coords in sorted(picks.items()):
        orig = model.params[name]

        def f(x, name=name, orig=orig):
            model.params[name] = x
            try:
                return batch_loss(model, batch)
            finally:
                model.params[name] = orig

        worst = max(worst, finite_diff_check(f, orig.data, eps=1e-4, coords=sorted(coords)))
    return worst
