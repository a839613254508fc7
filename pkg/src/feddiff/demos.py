"""Desk-scale demonstration scenarios with PASS/FAIL verdicts.

Each runner returns a DemoResult carrying the verdict, a one-line headline,
and the underlying data rows for CSV export.  The same runners back the
acceptance suite, so thresholds are pinned here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clients import ClientState, LocalUpdateConfig, evaluate, local_update
from .codec import LayerMask, fit_norm, normalize
from .config import ExperimentConfig
from .data import PartitionSpec, make_blobs, make_mirrored_pair, partition_non_iid
from .diffusion import (DiffusionTrainConfig, default_schedule, sample,
                        train_diffusion)
from .guidance import GuidanceConfig, initialize_new_client
from .harness import ServerState, fedavg_aggregate, run_federation
from .inversion import extract_latent, invert_generate, reconstruct
from .models import build_mlp_tiny
from .rng import substream

ROUNDTRIP_TOL = 1e-8
MIXTURE_W1_TOL = 0.2
MIXTURE_MIN_MODE_MASS = 0.3
COLLAPSE_LOCAL_MIN = 0.9


@dataclass
class DemoResult:
    name: str
    passed: bool
    headline: str
    header: tuple
    rows: list = field(default_factory=list)
    values: dict = field(default_factory=dict)


def synthetic_fixture(method: str = "diffusion", seed: int = 0,
                      rounds_t: int = 30) -> ExperimentConfig:
    """The scaled non-IID fixture: 10 clients, 4 blob classes, s=20%,
    600 samples per client, tiny MLP, 100 diffusion steps."""
    cfg = ExperimentConfig()
    cfg.federation.method = method
    cfg.federation.n_clients = 10
    cfg.federation.rounds_t = rounds_t
    cfg.federation.window = 5
    cfg.federation.warmup = 5
    cfg.federation.seed = seed
    cfg.partition = PartitionSpec(s_percent=20.0, dominant_classes_per_client=2,
                                  samples_per_client=600, test_per_client=200)
    cfg.data.n_classes = 4
    cfg.data.dim = 8
    cfg.data.noise = 1.0
    cfg.data.radius = 2.0
    cfg.data.pool_size = 12000
    cfg.model.name = "mlp-tiny"
    cfg.model.hidden = 32
    cfg.local = LocalUpdateConfig(epochs=2, batch_size=50, lr=0.05)
    cfg.diffusion.diffusion_t = 100
    cfg.diffusion.steps_per_round = 200
    cfg.diffusion.lr = 1e-3
    cfg.diffusion.hidden = 128
    cfg.diffusion.depth = 3
    cfg.diffusion.batch_size = 64
    return cfg


def run_inversion_roundtrip(seed: int = 0, n_vectors: int = 20) -> DemoResult:
    """reconstruct(extract_latent(v)) must match v to 1e-8 relative, in
    64-bit, across dims 16..4096 and T in {100, 1000}."""
    rng = substream(seed, "roundtrip")
    dims = [16, 64, 256, 1024, 4096]
    rows = []
    worst = 0.0
    count = 0
    for T in (100, 1000):
        sched = default_schedule(T)
        for i in range(n_vectors // 2):
            dim = dims[i % len(dims)]
            v = rng.standard_normal(dim) * rng.uniform(0.1, 10.0)
            latent = extract_latent(v, sched, rng)
            back = reconstruct(latent, sched)
            rel = float(np.max(np.abs(back - v)
                               / np.maximum(1e-12, np.abs(v))))
            rows.append((T, dim, rel))
            worst = max(worst, rel)
            count += 1
    passed = worst <= ROUNDTRIP_TOL
    return DemoResult(
        name="inversion-roundtrip", passed=passed,
        headline=f"max relative reconstruction error {worst:.3e} over "
                 f"{count} vectors (tolerance {ROUNDTRIP_TOL:g})",
        header=("T", "dim", "rel_error"), rows=rows,
        values={"max_rel_error": worst})


def _mixture_sample(n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.integers(0, 2, size=n)
    return np.where(comp == 0, -2.0, 2.0) + 0.25 * rng.standard_normal(n)


def wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    """W1 between two equal-size empirical distributions on the line."""
    a = np.sort(np.asarray(a).ravel())
    b = np.sort(np.asarray(b).ravel())
    if a.shape != b.shape:
        raise ValueError("equal sample counts required")
    return float(np.abs(a - b).mean())


def run_mixture_ddpm(seed: int = 0, train_steps: int = 4000) -> DemoResult:
    """Train on a bimodal 1-D mixture and check the generated distribution:
    W1 to a fresh oracle sample below tolerance, both modes populated."""
    rng = substream(seed, "mixture-data")
    train = _mixture_sample(2000, rng)
    mu, sd = float(train.mean()), float(train.std())
    data = ((train - mu) / sd).reshape(-1, 1).astype(np.float32)
    sched = default_schedule(100)
    tcfg = DiffusionTrainConfig(steps=train_steps, batch_size=128, lr=1e-3,
                                hidden=64, depth=3)
    est = train_diffusion(data, tcfg, sched, substream(seed, "mixture-train"))
    gen = sample(est, sched, substream(seed, "mixture-sample"), 2000).ravel()
    gen = gen * sd + mu
    oracle = _mixture_sample(2000, substream(seed, "mixture-oracle"))
    w1 = wasserstein1(gen, oracle)
    frac_left = float((gen < 0).mean())
    frac_right = 1.0 - frac_left
    passed = (w1 <= MIXTURE_W1_TOL
              and min(frac_left, frac_right) >= MIXTURE_MIN_MODE_MASS)
    rows = [(i, float(g), float(o)) for i, (g, o) in
            enumerate(zip(np.sort(gen), np.sort(oracle)))]
    return DemoResult(
        name="mixture-ddpm", passed=passed,
        headline=f"Wasserstein-1 {w1:.4f} (tolerance {MIXTURE_W1_TOL}), "
                 f"mode mass {frac_left:.2f}/{frac_right:.2f}",
        header=("rank", "generated", "oracle"), rows=rows,
        values={"w1": w1, "frac_left": frac_left, "frac_right": frac_right})


def run_collapse(seed: int = 0, rounds: int = 25,
                 window: int = 20) -> DemoResult:
    """Two mirrored binary tasks: linear averaging collapses to chance while
    inversion-generated parameters stay client-competent."""
    (tr_a, te_a), (tr_b, te_b) = make_mirrored_pair(
        400, 200, dim=2, noise=0.35, radius=1.0,
        rng=substream(seed, "collapse-data"))
    model = build_mlp_tiny(2, 2, hidden=8)
    init = model.init_params(substream(seed, "collapse-init"))
    lcfg = LocalUpdateConfig(epochs=2, batch_size=50, lr=0.1)
    clients = [
        ClientState(0, tr_a.x, tr_a.y, te_a.x, te_a.y, model, init.copy(),
                    rng=substream(seed, "collapse-client", 0)),
        ClientState(1, tr_b.x, tr_b.y, te_b.x, te_b.y, model, init.copy(),
                    rng=substream(seed, "collapse-client", 1)),
    ]
    corpus = []
    for r in range(rounds):
        for c in clients:
            local_update(c, c.params, lcfg)
        if r >= rounds - window:
            corpus.extend(c.params.astype(np.float64).copy() for c in clients)

    acc_local = [evaluate(c, c.params)[0] for c in clients]
    midpoint = fedavg_aggregate([c.params for c in clients])
    acc_mid = [evaluate(c, midpoint)[0] for c in clients]
    avg_mid = sum(acc_mid) / len(acc_mid)

    stats = fit_norm(np.stack(corpus))
    corpus_n = normalize(np.stack(corpus), stats).astype(np.float32)
    sched = default_schedule(100)
    tcfg = DiffusionTrainConfig(steps=2000, batch_size=32, lr=1e-3,
                                hidden=64, depth=3)
    est = train_diffusion(corpus_n, tcfg, sched,
                          substream(seed, "collapse-train"))
    server = ServerState(layout=model.layout,
                         mask=LayerMask.all_layers(model.layout),
                         schedule=sched, window_rounds=window)
    server.norm_stats = stats

    acc_gen = []
    for c in clients:
        z = server.project_gen(c.params.astype(np.float64))
        latent = extract_latent(z, sched, substream(seed, "collapse-invert", c.id))
        z_new = invert_generate(est, latent, sched)
        gen = server.unproject_gen(z_new).astype(np.float32)
        acc_gen.append(evaluate(c, gen)[0])

    collapsed = avg_mid < min(acc_local)
    recovered = all(g >= m for g, m in zip(acc_gen, acc_mid))
    trained = min(acc_local) >= COLLAPSE_LOCAL_MIN
    passed = collapsed and recovered and trained
    rows = [(c.id, acc_local[i], acc_mid[i], acc_gen[i])
            for i, c in enumerate(clients)]
    return DemoResult(
        name="collapse", passed=passed,
        headline=(f"local accs {acc_local[0]:.3f}/{acc_local[1]:.3f}, "
                  f"averaged-midpoint mean {avg_mid:.3f}, "
                  f"inversion accs {acc_gen[0]:.3f}/{acc_gen[1]:.3f}"),
        header=("client", "local_acc", "midpoint_acc", "inversion_acc"),
        rows=rows,
        values={"acc_local": acc_local, "acc_mid": acc_mid,
                "avg_mid": avg_mid, "acc_gen": acc_gen})


def _rounds_to_target(curve: list[float], target: float) -> int:
    for i, acc in enumerate(curve, 1):
        if acc >= target:
            return i
    return len(curve) + 1


def run_new_client(seed: int = 0, adapt_rounds: int = 12,
                   fixture_rounds: int = 25) -> DemoResult:
    """Train a federation, then adapt a held-out client with and without
    guided denoising; guided must reach 95% of the local plateau at least
    as fast as plain local training."""
    cfg = synthetic_fixture(method="diffusion", seed=seed,
                            rounds_t=fixture_rounds)
    result = run_federation(cfg)
    server = result.server

    spec = cfg.partition
    shard, _ = partition_non_iid(result.dataset, spec, 1,
                                 substream(seed, "new-client-shard"))
    (tr, te) = shard[0]
    init = result.init_params

    def fresh_client():
        return ClientState(99, tr.x, tr.y, te.x, te.y, result.model,
                           init.copy(), rng=substream(seed, "new-client-rng"))

    # unguided: plain local rounds
    plain = fresh_client()
    unguided_curve = []
    for _ in range(adapt_rounds):
        local_update(plain, plain.params, cfg.local)
        unguided_curve.append(evaluate(plain, plain.params)[0])

    # guided: alternating local update and guided denoising
    guided = fresh_client()
    gcfg = GuidanceConfig(omega=cfg.guidance.omega,
                          init_rounds=adapt_rounds - 1,
                          denoise_steps=cfg.guidance.denoise_steps,
                          start_step=cfg.guidance.start_step,
                          delta_scale=cfg.guidance.delta_scale)
    metrics: list = []
    initialize_new_client(server, guided, gcfg, cfg.local,
                          substream(seed, "new-client-guide"), metrics=metrics)
    # metrics rows are after-local-update accuracies, one per round, so the
    # two curves pair round for round
    guided_curve = [acc for (_, acc, _) in metrics]

    plateau = unguided_curve[-1]
    target = 0.95 * plateau
    r_unguided = _rounds_to_target(unguided_curve, target)
    r_guided = _rounds_to_target(guided_curve, target)
    passed = r_guided <= r_unguided
    ratio = r_guided / max(r_unguided, 1)
    rows = [(i + 1,
             guided_curve[i] if i < len(guided_curve) else "",
             unguided_curve[i] if i < len(unguided_curve) else "")
            for i in range(max(len(guided_curve), len(unguided_curve)))]
    return DemoResult(
        name="new-client", passed=passed,
        headline=(f"rounds to 95% of plateau: guided {r_guided} vs "
                  f"unguided {r_unguided} (ratio {ratio:.2f}, "
                  f"plateau {plateau:.3f})"),
        header=("round", "guided_acc", "unguided_acc"), rows=rows,
        values={"rounds_guided": r_guided, "rounds_unguided": r_unguided,
                "ratio": ratio, "plateau": plateau,
                "guided_final": guided_curve[-1]})


DEMOS = {
    "collapse": run_collapse,
    "inversion-roundtrip": run_inversion_roundtrip,
    "mixture-ddpm": run_mixture_ddpm,
    "new-client": run_new_client,
}
