"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers. The desk-scale models (tiny preset, 200 lines, S=3, 10 epochs) are
trained once per session and cached on disk under ``.acceptance_cache/``,
keyed by the package source and the training configuration, so reruns of
an unchanged tree skip the training. Set ``CONTEXTSEIS_ACCEPTANCE_CACHE`` to
move the cache.
"""
import hashlib
import json
import math
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

import contextseis
from contextseis.autodiff import (
    BatchNormStats,
    Tape,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    expand_set,
    l1_loss,
    leaky_relu,
    max_pool2,
    mean_over_set,
    mul,
    reshape,
    scale,
    split_channels,
    sum_all,
    upsample_nearest2,
)
from contextseis.cli import describe, main
from contextseis.evaluation import PromptLayout, ensemble_variance, eval_by_position, identity_steering
from contextseis.model import ContextSeisNet, ModelSpec, SupportSet, build_model, load_checkpoint, save_checkpoint
from contextseis.synthgen import GeneratorConfig, InMemoryDataset, event_panel, generate_line
from contextseis.training import TrainConfig, read_log, train, write_log

from oracles import finite_diff, flatness_deviation, max_rel_error, residual_moveout

# Tolerances and thresholds of the acceptance criteria.
GRAD_REL_TOL = 1e-4
FD_STEP = 1e-5
INVARIANCE_TOL = 1e-10
MOVEOUT_GAP_SAMPLES = 3.0
FLATNESS_SAMPLES = 1.0
BEAT_UNET_DB = 0.5
PROXIMITY_DB = 0.5
PEAK_WINDOW = range(6, 15)
STEERING_RATIO = 0.5
SPEARMAN_MIN = 0.3

# Desk-scale training shared by criteria 4 to 8.
DESK_DATA = GeneratorConfig.desk(seed=0)
DESK_TRAIN = dict(S=3, epochs=10, batch_size=8, replace_fraction=0.25, draws_per_line=3)
CACHE = Path(os.environ.get("CONTEXTSEIS_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".acceptance_cache"))


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n}: {detail}"


# ---------------------------------------------------------------- shared desk models


# Modules that decide what a training run produces; edits elsewhere keep the cache.
TRAINING_SOURCES = ("autodiff.py", "model.py", "synthgen.py", "tensorio.py", "training.py")


def _fingerprint(payload) -> str:
    h = hashlib.sha256()
    for name in TRAINING_SOURCES:
        h.update((Path(contextseis.__file__).parent / name).read_bytes())
    h.update(json.dumps(payload, sort_keys=True).encode())
    return h.hexdigest()[:16]


class DeskModels:
    def __init__(self):
        self.dataset = InMemoryDataset.generate(DESK_DATA)
        self._models = {}

    def get(self, arch, seed):
        if (arch, seed) in self._models:
            return self._models[arch, seed]
        cfg = TrainConfig(**DESK_TRAIN, seed=seed)
        key = _fingerprint([arch, seed, cfg.to_json(), DESK_DATA.to_json()])
        run = CACHE / f"{arch}-seed{seed}-{key}"
        if not (run / "train_log.csv").exists():
            model = build_model(arch, ModelSpec.preset("tiny"), seed=seed)
            records = train(model, self.dataset, cfg)
            tmp = run.with_name(run.name + ".partial")
            shutil.rmtree(tmp, ignore_errors=True)
            save_checkpoint(model, tmp / "checkpoint", cfg.to_json(), epoch=cfg.epochs)
            write_log(records, tmp / "train_log.csv")
            tmp.rename(run)
        entry = (load_checkpoint(run / "checkpoint"), read_log(run / "train_log.csv"))
        self._models[arch, seed] = entry
        return entry


@pytest.fixture(scope="session")
def desk():
    return DeskModels()


# ---------------------------------------------------------------- 1. gradients


def _op_cases(rng):
    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    x4, w, b = t(2, 3, 6, 5), t(4, 3, 3, 3), t(4)
    g, be = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True), t(3)
    r4 = rng.standard_normal((2, 4, 6, 5))
    xb = t(2, 3, 4, 4)
    xp = t(1, 2, 6, 4)
    xu = t(1, 2, 3, 2)
    a5, c5 = t(3, 2, 2, 4, 4), t(3, 2, 1, 4, 4)
    s5 = t(3, 2, 2, 4, 4)
    e4 = t(2, 2, 4, 4)
    p, q = t(3, 4), t(3, 4)
    stats = BatchNormStats.fresh(3)

    def weighted(y, seed):
        return sum_all(mul(y, Tensor(np.random.default_rng(seed).standard_normal(y.shape))))

    return [
        ("conv2d", lambda: weighted(conv2d(x4, w, b), 1), [x4, w, b]),
        ("batch_norm/train", lambda: weighted(batch_norm(xb, g, be, stats.fresh(3), True), 2), [xb, g, be]),
        ("batch_norm/eval", lambda: weighted(batch_norm(xb, g, be, BatchNormStats(np.full(3, 0.2), np.full(3, 1.5)), False), 3), [xb, g, be]),
        ("leaky_relu", lambda: weighted(leaky_relu(xb), 4), [xb]),
        ("max_pool2", lambda: weighted(max_pool2(xp), 5), [xp]),
        ("upsample_nearest2", lambda: weighted(upsample_nearest2(xu), 6), [xu]),
        ("concat_channels", lambda: weighted(concat_channels(a5, c5), 7), [a5, c5]),
        ("split_channels", lambda: weighted(split_channels(a5, 1)[1], 8), [a5]),
        ("mean_over_set", lambda: weighted(mean_over_set(s5), 9), [s5]),
        ("expand_set", lambda: weighted(expand_set(e4, 3), 10), [e4]),
        ("reshape", lambda: weighted(reshape(s5, (6, 2, 4, 4)), 11), [s5]),
        ("add/mul/scale", lambda: sum_all(scale(mul(add(p, q), q), 0.7)), [p, q]),
        ("l1_loss", lambda: l1_loss(p, q), [p, q]),
        ("conv+l1", lambda: l1_loss(conv2d(x4, w, b), Tensor(r4)), [x4, w, b]),
    ]


def _max_grad_error(f, tensors):
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for tns in tensors:
        numeric = finite_diff(lambda: f().item(), tns.data, h=FD_STEP)
        worst = max(worst, max_rel_error(tns.grad, numeric))
    return worst


def test_criterion_1_gradients(capsys):
    rng = np.random.default_rng(0)
    errors = {name: _max_grad_error(f, ts) for name, f, ts in _op_cases(rng)}
    model = ContextSeisNet(ModelSpec(channels=(4,)), seed=3)
    X = Tensor(rng.standard_normal((1, 1, 8, 8)), requires_grad=True)
    support = SupportSet(rng.standard_normal((2, 8, 8)), rng.standard_normal((2, 8, 8)))
    Y = Tensor(rng.standard_normal((1, 1, 8, 8)))
    params = model.parameters()

    def f():
        return l1_loss(model(X, support, training=True), Y)

    with Tape() as tape:
        loss = f()
    tape.backward(loss, params + [X])
    worst_net = 0.0
    for p in params + [X]:
        worst_net = max(worst_net, max_rel_error(p.grad, finite_diff(lambda: f().item(), p.data, h=FD_STEP)))
    errors["ContextSeisNet(1 level, 4 ch, S=2, 8x8)"] = worst_net
    worst = max(errors, key=errors.get)
    ok = all(e < GRAD_REL_TOL for e in errors.values())
    verdict(capsys, 1, ok, f"max rel error {errors[worst]:.2e} ({worst}) over {len(errors)} checks, tol {GRAD_REL_TOL:g}")


# ---------------------------------------------------------------- 2. invariance


def test_criterion_2_invariance(capsys):
    rng = np.random.default_rng(1)
    worst = 0.0
    for seed in range(3):
        spec = ModelSpec.preset("tiny") if seed == 0 else ModelSpec(channels=(4, 8))
        model = ContextSeisNet(spec, seed=seed)
        for st in model.named_stats().values():
            st.running_mean = rng.normal(0, 0.3, st.running_mean.shape)
            st.running_var = rng.uniform(0.5, 2.0, st.running_var.shape)
        for S in (1, 2, 3, 5):
            X = rng.standard_normal((2, 1, 16, 8))
            P, L = rng.standard_normal((2, S, 16, 8))
            ref = model.predict(X, SupportSet(P, L))
            perm = rng.permutation(S)
            worst = max(worst, np.max(np.abs(model.predict(X, SupportSet(P[perm], L[perm])) - ref)))
            for k in (2, 3):
                dup = SupportSet(np.concatenate([P] * k), np.concatenate([L] * k))
                worst = max(worst, np.max(np.abs(model.predict(X, dup) - ref)))
    verdict(capsys, 2, worst < INVARIANCE_TOL, f"max |dY*| {worst:.2e} over S in {{1,2,3,5}}, tol {INVARIANCE_TOL:g}")


# ---------------------------------------------------------------- 3. generator


def test_criterion_3_generator(capsys):
    cfg = GeneratorConfig.desk(n_lines=100)
    flat_cfg = GeneratorConfig.desk(n_lines=100, nmo_error_max=0.0)
    additive = True
    flat = 0.0
    prim, mult = [], []
    for i in range(100):
        line = generate_line(cfg, i)
        additive &= np.array_equal(line.labels + line.multiples, line.gathers)
        additive &= np.array_equal(line.gathers - line.labels, line.multiples)
        flat = max(flat, flatness_deviation(generate_line(flat_cfg, i), flat_cfg, event_panel))
        for ev in line.events:
            for m in (0, 10, 20):
                r = residual_moveout(event_panel(ev, m, cfg))
                if r is not None:
                    (prim if ev.kind == "primary" else mult).append(r)
    gap = float(np.mean(mult) - np.mean(prim))
    ok = additive and flat <= FLATNESS_SAMPLES and gap >= MOVEOUT_GAP_SAMPLES
    verdict(
        capsys,
        3,
        ok,
        f"additivity {'exact' if additive else 'BROKEN'}; flatness {flat:.2f} <= {FLATNESS_SAMPLES} samples; "
        f"moveout gap {gap:.2f} >= {MOVEOUT_GAP_SAMPLES} samples",
    )


# ---------------------------------------------------------------- 4 to 6. trained desk models


def test_criterion_4_beats_unet(desk, capsys):
    lay = PromptLayout((0, 10, 20))
    csn, _ = desk.get("contextseisnet", 1)
    unet, _ = desk.get("unet", 1)
    a = eval_by_position(csn, desk.dataset, lay).mean_psnr()
    b = eval_by_position(unet, desk.dataset, lay).mean_psnr()
    verdict(capsys, 4, a - b >= BEAT_UNET_DB, f"ContextSeisNet {a:.3f} dB vs U-Net {b:.3f} dB, gap {a - b:.3f} >= {BEAT_UNET_DB}")


def test_criterion_5_prompt_proximity(desk, capsys):
    csn, _ = desk.get("contextseisnet", 1)
    near = eval_by_position(csn, desk.dataset, PromptLayout((0, 1, 2)))
    gap = near.mean_psnr(range(0, 5)) - near.mean_psnr(range(16, 21))
    centre = eval_by_position(csn, desk.dataset, PromptLayout((8, 10, 12)))
    peak = int(np.argmax(centre.psnr_mean))
    ok = gap >= PROXIMITY_DB and peak in PEAK_WINDOW
    verdict(capsys, 5, ok, f"[0,1,2] near-far gap {gap:.3f} >= {PROXIMITY_DB} dB; [8,10,12] argmax at {peak} in 6..14")


def test_criterion_6_identity_steering(desk, capsys):
    csn, _ = desk.get("contextseisnet", 1)
    l1_id, l1_true = identity_steering(csn, desk.dataset, PromptLayout((0, 10, 20)))
    ratio = l1_id / l1_true
    verdict(capsys, 6, ratio <= STEERING_RATIO, f"L1 identity {l1_id:.4f} / ground truth {l1_true:.4f} = {ratio:.3f} <= {STEERING_RATIO}")


# ---------------------------------------------------------------- 7. ensemble


def test_criterion_7_ensemble(desk, capsys):
    models = [desk.get("contextseisnet", s)[0] for s in (1, 2, 3, 4)]
    ens = ensemble_variance(models, desk.dataset, PromptLayout((0, 1, 2)))
    ok = math.isfinite(ens.spearman) and ens.spearman > SPEARMAN_MIN
    verdict(capsys, 7, ok, f"Spearman(std, MSE) {ens.spearman:.3f} > {SPEARMAN_MIN} with K=4")


# ---------------------------------------------------------------- 8. stability


def test_criterion_8_norm_stability(desk, capsys, tmp_path):
    finals = []
    for seed in (1, 2, 3):
        _, records = desk.get("contextseisnet", seed)
        losses = [r.loss for r in records]
        finals.append((np.mean(losses[:10]), np.mean(losses[-10:]), all(math.isfinite(v) for v in losses)))
    with_norm_ok = all(f < i and fin for i, f, fin in finals)
    data = tmp_path / "data"
    assert main(["generate", "--lines", "20", "--seed", "0", "--out", str(data)]) == 0
    code = main(["train", "--data", str(data), "--out", str(tmp_path / "nonorm"), "--no-norm", "--prompts", "3",
                 "--epochs", "2", "--seed", "1", "--quiet"])
    ok = with_norm_ok and code in (0, 4)
    summary = ", ".join(f"{i:.3f}->{f:.3f}" for i, f, _ in finals)
    verdict(capsys, 8, ok, f"BatchNorm runs (first10->last10 loss): {summary}; --no-norm exit code {code}")


# ---------------------------------------------------------------- 9. determinism and formats


def _pipeline(root: Path):
    steps = [
        ["generate", "--lines", "12", "--cdps", "6", "--seed", "5", "--out", root / "data"],
        ["train", "--data", root / "data", "--out", root / "run", "--prompts", "2", "--epochs", "2",
         "--batch", "4", "--seed", "3", "--quiet"],
        ["eval", "--data", root / "data", "--checkpoint", root / "run" / "checkpoint", "--out", root / "eval",
         "--layout", "0,1,2", "--layout", "0,5"],
    ]
    return [main([str(a) for a in s]) for s in steps]


def test_criterion_9_determinism_and_formats(capsys, tmp_path):
    codes = _pipeline(tmp_path / "a") + _pipeline(tmp_path / "b")
    files = ["data/gathers.bin", "data/labels.bin", "data/manifest.json", "run/checkpoint/params.bin",
             "run/checkpoint/checkpoint.json", "run/train_log.csv", "eval/report.csv"]
    same = [f for f in files if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    a = tmp_path / "a"
    ds, ck, tn = describe(a / "data"), describe(a / "run" / "checkpoint"), describe(a / "data" / "gathers.bin")
    manifest = json.loads((a / "data" / "manifest.json").read_text())
    model = load_checkpoint(a / "run" / "checkpoint")
    roundtrip = (
        (ds["N"], ds["M"], ds["H"], ds["W"]) == (manifest["N"], manifest["M"], manifest["H"], manifest["W"])
        and ck["param_count"] == model.num_parameters() == ck["param_count_formula"]
        and tn["shape"] == [12, 6, 128, 32]
        and all(main(["inspect", str(a / p)]) == 0 for p in ("data", "run/checkpoint", "data/labels.bin"))
    )
    ok = codes == [0] * 6 and len(same) == len(files) and roundtrip
    verdict(capsys, 9, ok, f"{len(same)}/{len(files)} artifacts byte-identical; inspect round-trip {'ok' if roundtrip else 'FAILED'}")
