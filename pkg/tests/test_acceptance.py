"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed as it finishes and again
in the terminal summary (see ``conftest.py``).
"""
import math
import time

import numpy as np
import pytest
import torch

from mipet import checkpoint, npyio
from mipet.cli import main
from mipet.config import ExperimentConfig, apply_overrides
from mipet.expfam import GaussianHeads, ef_kl, gaussian_kl
from mipet.matexp import commutation_probe, matrix_exp, summarize_probe
from mipet.metrics import RepresentationTable, dci, fvm, mig, sap
from mipet.model import MipetModel, mipet_forward, reparameterize
from mipet.autodiff import normal
from mipet.probes import run_cell, run_symmetry_benefit, run_toy2d, unit_scaling_gap
from mipet.training import build_dataset

RESULTS: dict[int, str] = {}


def record(capsys, number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[number] = line
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# 1 -----------------------------------------------------------------------------


def _fd_check(model, x, term, count, seed, h=1e-6):
    named = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in named])
    bounds = np.cumsum(sizes)
    picks = np.random.default_rng(seed).choice(sizes.sum(), size=count, replace=False)

    def value():
        return getattr(mipet_forward(model, x, 3), term)

    grads = torch.autograd.grad(value(), named, allow_unused=True)
    worst = 0.0
    for f in picks:
        j = int(np.searchsorted(bounds, f, side="right"))
        off = int(f - (bounds[j - 1] if j else 0))
        g = grads[j]
        analytic = 0.0 if g is None else float(g.reshape(-1)[off])
        flat = named[j].data.view(-1)
        orig = float(flat[off])
        flat[off] = orig + h
        up = float(value().detach())
        flat[off] = orig - h
        down = float(value().detach())
        flat[off] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6))
    return worst


def test_criterion_1_gradient_integrity(capsys):
    t0 = time.time()
    model = MipetModel((8, 8), latent_dim=4, k=2, encoder="mlp", hidden=16, unit_init_scale=0.3,
                       mask_lambda=1.0, seed=0)
    x = (np.random.default_rng(0).random((6, 8, 8)) < 0.3).astype(np.float64)
    worst = {term: _fd_check(model, x, term, 100, seed=i)
             for i, term in enumerate(("rec", "kl", "el", "cali"))}
    elapsed = time.time() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(capsys, 1, ok, f"max rel err {detail}; {elapsed:.0f}s")


# 2 -----------------------------------------------------------------------------


def test_criterion_2_matrix_exponential(capsys):
    t0 = time.time()
    diag_err = 0.0
    for entries in ([0.0, 1.0], [-1.0, 0.5, 0.25, 1.0], [-0.7, 0.0, 0.3]):
        d = torch.diag(torch.tensor(entries))
        diag_err = max(diag_err, float((matrix_exp(d) - torch.diag(torch.exp(torch.diag(d)))).abs().max()))
    flip = torch.tensor([[0.0, 1.0], [0.0, 0.0]])
    nil_err = float((matrix_exp(flip) - torch.tensor([[1.0, 1.0], [0.0, 1.0]])).abs().max())
    nil = torch.triu(torch.randn(5, 5, generator=torch.Generator().manual_seed(0)), 1)
    closed = torch.eye(5) + nil + nil @ nil / 2 + nil @ nil @ nil / 6 + nil @ nil @ nil @ nil / 24
    nil_err = max(nil_err, float((matrix_exp(nil) - closed).abs().max()))
    gen = torch.Generator().manual_seed(1)
    inv_err = sym_err = 0.0
    for n in (4, 10):
        for _ in range(1000):
            a = torch.randn(n, n, generator=gen)
            inv_err = max(inv_err, float((matrix_exp(a) @ matrix_exp(-a) - torch.eye(n)).abs().max()))
            e = matrix_exp(a + a.T)
            sym_err = max(sym_err, float((e - e.T).abs().max()))
    elapsed = time.time() - t0
    ok = diag_err < 1e-12 and nil_err < 1e-12 and inv_err < 1e-8 and sym_err < 1e-12 and elapsed < 60
    record(capsys, 2, ok, f"diag {diag_err:.1e}, nilpotent {nil_err:.1e}, inverse {inv_err:.1e}, "
                          f"symmetry {sym_err:.1e}; {elapsed:.0f}s")


# 3 -----------------------------------------------------------------------------


def test_criterion_3_gaussian_reduction(capsys):
    g = np.random.default_rng(3)
    mu = torch.as_tensor(g.uniform(-3, 3, (1000, 1)))
    var = torch.as_tensor(np.exp(g.uniform(-4, 3, (1000, 1))))
    heads = GaussianHeads(1)
    kl = ef_kl(heads.to_natural(mu, var), heads.to_natural(torch.zeros_like(mu), torch.ones_like(var)), heads)
    kl_err = float((kl - gaussian_kl(mu, torch.log(var))).abs().max())

    m = MipetModel((8, 8), latent_dim=4, k=1, hidden=16, heads="gaussian", w_el=0.0, w_cali=0.0,
                   unit_init_scale=0.0, seed=0)
    x = torch.as_tensor((g.random((6, 8, 8)) < 0.3).astype(np.float64))
    total = mipet_forward(m, x, 11).total
    mu_x, lv_x = m.encode(x)
    z = reparameterize(mu_x, lv_x, normal(11, "reparameterize", tuple(mu_x.shape)))
    elbo = m.recon_loss(x, m.decode(z)).mean() + m.beta * gaussian_kl(mu_x, lv_x).mean()
    elbo_err = abs(float(total.detach()) - float(elbo.detach()))
    record(capsys, 3, kl_err < 1e-6 and elbo_err < 1e-6,
           f"EF-KL vs closed form {kl_err:.1e}, MIPET loss vs VAE ELBO {elbo_err:.1e}")


# 4 -----------------------------------------------------------------------------


def test_criterion_4_multi_unit_identity(capsys):
    base = ExperimentConfig()
    gaps = [unit_scaling_gap(base, k=2 + i % 4, batch=16, seed=i) for i in range(100)]
    record(capsys, 4, max(gaps) < 1e-8, f"max gap {max(gaps):.1e} over 100 batches, k in 2..5")


# 5 -----------------------------------------------------------------------------


def test_criterion_5_commutation_probe(capsys):
    t0 = time.time()
    parts, ok = [], True
    for n in (4, 6, 10):
        s = summarize_probe(commutation_probe(n, 1000, seed=n))
        e_s, e_m, m_n = (s[f]["asym_mean"] for f in ("E_S", "E_M", "M_n"))
        asym = s["E_S"]["asym_max"]
        ok &= e_s < e_m < m_n and asym < 1e-12
        parts.append(f"n={n}: mean asym {e_s:.2e} < {e_m:.3f} < {m_n:.3f}, E_S max {asym:.1e}")
    elapsed = time.time() - t0
    record(capsys, 5, ok and elapsed < 60, "; ".join(parts) + f"; {elapsed:.0f}s")


# 6 -----------------------------------------------------------------------------


def test_criterion_6_metric_oracles(capsys, sprites):
    t0 = time.time()
    perfect = sprites.factors / np.asarray(sprites.cardinalities, dtype=np.float64)
    noise = np.random.default_rng(0).standard_normal((len(sprites), 10))
    chance = 100 / sprites.num_factors
    scores = {}
    for name, codes in (("perfect", perfect), ("noise", noise)):
        t = RepresentationTable.from_dataset(codes, sprites)
        scores[name] = {"fvm": fvm(codes, sprites), "mig": mig(t), "sap": sap(t), "dci": dci(t)[0]}
    elapsed = time.time() - t0
    p, q = scores["perfect"], scores["noise"]
    ok = (min(p.values()) >= 95 and max(q["mig"], q["sap"], q["dci"]) <= 5
          and abs(q["fvm"] - chance) <= 5 and elapsed < 300)
    fmt = lambda d: "/".join(f"{v:.1f}" for v in d.values())  # noqa: E731
    record(capsys, 6, ok, f"perfect fvm/mig/sap/dci {fmt(p)}; noise {fmt(q)} (chance {chance:.0f}); "
                          f"{elapsed:.0f}s")


# 7 -----------------------------------------------------------------------------

BENCH = ["model.beta=4", "schedule.epochs=20"]


@pytest.mark.slow
def test_criterion_7_desk_benchmark(capsys):
    t0 = time.time()
    base = apply_overrides(ExperimentConfig(), BENCH)
    dataset = build_dataset(base.data)
    runs = {}
    for seed in (0, 1, 2):
        for name, extra in (("bvae", ["model.k=0"]), ("mipet", ["model.k=2", "model.mode=symmetric"])):
            runs[name, seed] = run_cell(apply_overrides(base, [*extra, f"seed={seed}"]), dataset)
    elapsed = time.time() - t0
    metrics = list(runs["bvae", 0])
    wins = {m: sum(runs["mipet", s][m] > runs["bvae", s][m] for s in (0, 1, 2)) for m in metrics}
    mean_mig = {n: float(np.mean([runs[n, s]["mig"] for s in (0, 1, 2)])) for n in ("bvae", "mipet")}
    ok = (mean_mig["mipet"] >= mean_mig["bvae"] and sum(w >= 2 for w in wins.values()) >= 2
          and elapsed < 3600)
    record(capsys, 7, ok, f"mean MIG bvae {mean_mig['bvae']:.2f} vs mipet {mean_mig['mipet']:.2f}; "
                          f"seed wins {wins}; {elapsed:.0f}s")


# 8 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_toy_study(capsys):
    t0 = time.time()
    res = run_toy2d("beta", seeds=(0, 1, 2), models=("vae", "mipet", "mipet_k2"))
    elapsed = time.time() - t0
    skew_wins = sum(res["mipet"][s]["skew"] > res["vae"][s]["skew"] for s in (0, 1, 2))
    unit_kl = [res["mipet_k2"][s]["unit_kl"] for s in (0, 1, 2)]
    ok = skew_wins >= 2 and float(np.mean(unit_kl)) > 0.1 and elapsed < 600
    skews = ", ".join(f"{res['vae'][s]['skew']:.3f}/{res['mipet'][s]['skew']:.3f}" for s in (0, 1, 2))
    record(capsys, 8, ok, f"|skew| vae/mipet {skews} ({skew_wins}/3 wins); k=2 unit KL "
                          f"{', '.join(f'{v:.3f}' for v in unit_kl)}; {elapsed:.0f}s")


# 9 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_symmetric_benefit(capsys):
    t0 = time.time()
    base = apply_overrides(ExperimentConfig(), [*BENCH, "model.k=2"])
    ratio, _, errors = run_symmetry_benefit(base, range(10), build_dataset(base.data))
    elapsed = time.time() - t0
    ok = not math.isnan(ratio) and ratio > 0.5
    record(capsys, 9, ok, f"ratio {ratio:.3f} over 10 seeds x 4 metrics ({len(errors)} failed cells); "
                          f"{elapsed:.0f}s")


# 10 ----------------------------------------------------------------------------


def test_criterion_10_round_trips(capsys, tmp_path):
    g = np.random.default_rng(10)
    arrays = {"w": g.standard_normal((7, 3)), "b": g.standard_normal(5) * 1e300,
              "s": np.array([0.0, -0.0, np.nan, np.inf, -np.inf, 5e-324]), "e": np.zeros((0, 3))}
    back, _ = checkpoint.loads(checkpoint.dumps(arrays, step=3, config_hash="abc"), config_hash="abc")
    ck_ok = list(back) == list(arrays) and all(
        back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes() for k, v in arrays.items())

    npy_ok = True
    for dtype in ("u1", "i2", "i4", "i8", "f4", "f8", "b1"):
        shape = tuple(g.integers(0, 5, g.integers(0, 4)))
        a = (g.standard_normal(shape) * 50).astype(dtype)
        b = npyio.loads(npyio.dumps(a))
        npy_ok &= a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

    small = ["data.subsample=600", "schedule.epochs=1", "schedule.batch_size=128",
             "model.latent_dim=4", "model.k=1"]
    runs = []
    for out in ("a", "b"):
        root = tmp_path / out
        args = ["train", "--out", str(root)] + [a for s in small for a in ("--set", s)]
        assert main(args) == 0
        runs.append(apply_overrides(ExperimentConfig(), [*small, f"output={root}"]).run_dir())
    loss_ok = (runs[0] / "losses.csv").read_bytes() == (runs[1] / "losses.csv").read_bytes()
    record(capsys, 10, ck_ok and npy_ok and loss_ok,
           f"checkpoint bit-exact {ck_ok}, npy identity {npy_ok}, losses.csv byte-identical {loss_ok}")
