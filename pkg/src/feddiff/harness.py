"""End-to-end federation loop: non-IID partitioning, round scheduling,
client sampling, linear aggregation baselines, and the diffusion
aggregation rounds with inversion-based personalization.

Round shape for the diffusion method mirrors the server loop: each sampled
client's current model is uploaded, the denoiser trains on the rolling
window, a personalized vector is generated through inversion and merged
with the retained layers, and the client fine-tunes on it.  The first
warm-up rounds run FedAvg dispatch so the server has a corpus to train on.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__, codec
from .autoencoder import AutoencoderPair, decode as ae_decode
from .autoencoder import encode as ae_encode
from .autoencoder import train_autoencoder
from .clients import ClientState, evaluate, local_update
from .config import AEStageConfig, DataConfig, ExperimentConfig, config_hash
from .data import (LabeledDataset, load_csv, load_idx, make_blobs,
                   partition_non_iid)
from .diffusion import (DiffusionTrainConfig, DiffusionTrainer, NoiseSchedule,
                        default_schedule, make_schedule, sample)
from .exceptions import ConfigError, DataError
from .inversion import extract_latent, invert_generate
from .metrics import MetricsReport
from .models import ModelSpec, build_model
from .rng import substream


def fedavg_aggregate(params: list, weights=None) -> np.ndarray:
    """Linear aggregation: sum_i (m_i / N) theta_i."""
    if not params:
        raise ValueError("nothing to aggregate")
    mat = np.stack([np.asarray(p) for p in params])
    if weights is None:
        w = np.ones(len(params), dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(params),):
            raise ValueError("one weight per parameter vector required")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
    w = w / w.sum()
    return (w[:, None] * mat).sum(axis=0).astype(mat.dtype)


@dataclass
class ServerState:
    """Rolling parameter window, norm stats, denoiser, and the projection
    into/out of the denoiser's training space."""

    layout: codec.Layout
    mask: codec.LayerMask
    schedule: NoiseSchedule
    window_rounds: int
    normalize: bool = True
    buffer: dict = field(default_factory=dict)  # round -> {client_id: raw vec}
    norm_stats: codec.NormStats | None = None
    trainer: DiffusionTrainer | None = None
    ae: AutoencoderPair | None = None

    @property
    def estimator(self):
        return self.trainer.est if self.trainer is not None else None

    @property
    def gen_dim(self) -> int:
        return codec.mask_dim(self.layout, self.mask)

    def add_uploads(self, round_idx: int, uploads: dict) -> None:
        self.buffer[round_idx] = {cid: np.asarray(v, dtype=np.float64)
                                  for cid, v in uploads.items()}
        for r in [r for r in self.buffer if r <= round_idx - self.window_rounds]:
            del self.buffer[r]
        corpus = self.corpus_raw()
        if corpus.shape[0] >= 2:
            if self.normalize:
                self.norm_stats = codec.fit_norm(corpus)
            else:
                d = corpus.shape[1]
                self.norm_stats = codec.NormStats(mean=np.zeros(d),
                                                  std=np.ones(d))

    def corpus_raw(self) -> np.ndarray:
        rows = [vec for r in sorted(self.buffer)
                for _, vec in sorted(self.buffer[r].items())]
        return (np.stack(rows) if rows
                else np.zeros((0, self.gen_dim), dtype=np.float64))

    def corpus_model_space(self) -> np.ndarray:
        return self.project_gen(self.corpus_raw())

    # raw generated-layer subvector <-> denoiser training space
    def project_gen(self, g: np.ndarray) -> np.ndarray:
        z = codec.normalize(np.asarray(g, dtype=np.float64), self.norm_stats)
        if self.ae is not None:
            z = ae_encode(self.ae, z)
        return z

    def unproject_gen(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.ae is not None:
            z = ae_decode(self.ae, z)
        return codec.denormalize(z, self.norm_stats)

    # full parameter vector <-> (model-space subvector, retained raw part)
    def project_params(self, params: np.ndarray):
        gen, retained = codec.split_by_mask(np.asarray(params, np.float64),
                                            self.layout, self.mask)
        return self.project_gen(gen), retained

    def unproject_params(self, z: np.ndarray, retained: np.ndarray) -> np.ndarray:
        return codec.merge_by_mask(self.unproject_gen(z), retained,
                                   self.layout, self.mask)

    @property
    def model_dim(self) -> int:
        return self.ae.latent_dim if self.ae is not None else self.gen_dim


@dataclass
class RunResult:
    report: MetricsReport
    server: ServerState | None
    clients: list
    model: ModelSpec
    init_params: np.ndarray
    dataset: LabeledDataset
    shards: list
    groups: list


def build_dataset(cfg: DataConfig, seed: int) -> LabeledDataset:
    if cfg.kind == "blobs":
        shape = tuple(cfg.image_shape) if cfg.image_shape else None
        return make_blobs(cfg.pool_size, cfg.n_classes, dim=cfg.dim,
                          noise=cfg.noise, radius=cfg.radius,
                          rng=substream(seed, "dataset"), image_shape=shape)
    if cfg.kind == "idx":
        return load_idx(cfg.images_path, cfg.labels_path)
    if cfg.kind == "csv":
        return load_csv(cfg.csv_path, label_col=cfg.label_col)
    raise ConfigError(f"unknown data kind {cfg.kind!r}")


def build_model_from_config(cfg: ExperimentConfig,
                            dataset: LabeledDataset) -> ModelSpec:
    input_shape = dataset.x.shape[1:]
    name = cfg.model.name
    if name == "mlp-tiny":
        return build_model(name, input_shape, dataset.n_classes,
                           hidden=cfg.model.hidden)
    return build_model(name, input_shape, dataset.n_classes,
                       fc_hidden=cfg.model.hidden)


def make_schedule_from_config(dcfg) -> NoiseSchedule:
    if dcfg.beta_start is None or dcfg.beta_end is None:
        return default_schedule(dcfg.diffusion_t)
    return make_schedule(dcfg.diffusion_t, dcfg.beta_start, dcfg.beta_end,
                         kind=dcfg.schedule_kind)


def _pmap(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _sample_clients(clients, fraction: float, seed: int, round_idx: int):
    k = math.ceil(fraction * len(clients))
    rng = substream(seed, "sampling", round_idx)
    idx = rng.choice(len(clients), size=k, replace=False)
    return [clients[i] for i in sorted(idx)]


def _log_phase(report, round_idx, clients, params_for, phase, workers):
    results = _pmap(lambda c: evaluate(c, params_for(c)), clients, workers)
    for c, (acc, loss) in zip(clients, results):
        report.add(round_idx, c.id, phase, acc, loss)


def _diffusion_train_cfg(dcfg) -> DiffusionTrainConfig:
    return DiffusionTrainConfig(
        steps=dcfg.steps_per_round, batch_size=dcfg.batch_size, lr=dcfg.lr,
        optimizer=dcfg.optimizer, momentum=dcfg.momentum, hidden=dcfg.hidden,
        depth=dcfg.depth, time_dim=dcfg.time_dim,
        unet_threshold=dcfg.unet_threshold,
        augment_sigma=dcfg.augment_sigma)


def _ae_enabled(ae_cfg: AEStageConfig, gen_dim: int, threshold: int) -> bool:
    if ae_cfg.enabled == "on":
        return True
    if ae_cfg.enabled == "off":
        return False
    return gen_dim > threshold


def _ensure_server_model(server: ServerState, cfg: ExperimentConfig,
                         seed: int) -> None:
    """Train the AE (once) and create the denoiser trainer on first use."""
    if server.ae is None and _ae_enabled(cfg.ae, server.gen_dim,
                                         cfg.diffusion.unet_threshold):
        corpus_norm = codec.normalize(server.corpus_raw(), server.norm_stats)
        server.ae = train_autoencoder(corpus_norm, cfg.ae,
                                      substream(seed, "server", "ae"))
    if server.trainer is None:
        server.trainer = DiffusionTrainer(
            server.model_dim, _diffusion_train_cfg(cfg.diffusion),
            server.schedule, substream(seed, "server", "est-init"))


def _run_local_only(cfg, clients, report):
    fed = cfg.federation
    for r in range(1, fed.rounds_t + 1):
        sampled = _sample_clients(clients, fed.participation, fed.seed, r)
        _pmap(lambda c: local_update(c, c.params, cfg.local), sampled,
              fed.workers)
        _log_phase(report, r, clients, lambda c: c.params, "afterFT",
                   fed.workers)


def _run_fedavg(cfg, clients, init, report, fine_tune: bool):
    fed = cfg.federation
    global_p = init
    for r in range(1, fed.rounds_t + 1):
        sampled = _sample_clients(clients, fed.participation, fed.seed, r)
        current = global_p
        _pmap(lambda c: local_update(c, current, cfg.local), sampled,
              fed.workers)
        global_p = fedavg_aggregate([c.params for c in sampled],
                                    [c.sample_count for c in sampled])
        _log_phase(report, r, clients, lambda c: global_p, "beforeFT",
                   fed.workers)
    if fine_tune:
        final_p = global_p
        _pmap(lambda c: local_update(c, final_p, cfg.local), clients,
              fed.workers)
        _log_phase(report, fed.rounds_t, clients, lambda c: c.params,
                   "afterFT", fed.workers)


def _generate_for_client(server: ServerState, cfg: ExperimentConfig,
                         client, upload, round_idx: int) -> np.ndarray:
    dcfg = cfg.diffusion
    seed = cfg.federation.seed
    if dcfg.passthrough:
        return client.params.copy()
    z = server.project_gen(upload)
    if dcfg.inversion:
        latent = extract_latent(z, server.schedule,
                                substream(seed, "invert", round_idx, client.id))
        z_new = invert_generate(server.estimator, latent, server.schedule,
                                noise_sign=dcfg.noise_sign)
    else:
        z_new = sample(server.estimator, server.schedule,
                       substream(seed, "sample", round_idx, client.id), 1)[0]
    _, retained = codec.split_by_mask(client.params, server.layout,
                                      server.mask)
    return server.unproject_params(z_new, retained).astype(client.params.dtype)


def _run_diffusion(cfg: ExperimentConfig, clients, model, init, report) -> ServerState:
    fed, dcfg = cfg.federation, cfg.diffusion
    layout = model.layout
    if fed.generated_layers:
        mask = codec.LayerMask(tuple(fed.generated_layers))
    else:
        mask = codec.LayerMask.all_layers(layout)
    mask.validate(layout)
    server = ServerState(layout=layout, mask=mask,
                         schedule=make_schedule_from_config(dcfg),
                         window_rounds=fed.window, normalize=dcfg.normalize)
    server_rng = substream(fed.seed, "server", "diffusion")
    warmup = 0 if dcfg.passthrough else min(cfg.warmup_rounds, fed.rounds_t)
    if dcfg.generation == "final-round":
        warmup = 0

    def uploads_of(group):
        return {c.id: codec.split_by_mask(c.params, layout, mask)[0]
                for c in group}

    global_p = init
    for r in range(1, fed.rounds_t + 1):
        sampled = _sample_clients(clients, fed.participation, fed.seed, r)
        if r <= warmup:
            current = global_p
            _pmap(lambda c: local_update(c, current, cfg.local), sampled,
                  fed.workers)
            server.add_uploads(r, uploads_of(sampled))
            global_p = fedavg_aggregate([c.params for c in sampled],
                                        [c.sample_count for c in sampled])
            _log_phase(report, r, clients, lambda c: global_p, "beforeFT",
                       fed.workers)
            _log_phase(report, r, clients, lambda c: c.params, "afterFT",
                       fed.workers)
            continue
        if dcfg.generation == "final-round" and r < fed.rounds_t:
            _pmap(lambda c: local_update(c, c.params, cfg.local), sampled,
                  fed.workers)
            server.add_uploads(r, uploads_of(sampled))
            _log_phase(report, r, clients, lambda c: c.params, "afterFT",
                       fed.workers)
            continue

        # generation round: upload current models, train denoiser, invert,
        # dispatch, fine-tune
        uploads = uploads_of(sampled)
        server.add_uploads(r, uploads)
        if not dcfg.passthrough:
            first = server.trainer is None
            _ensure_server_model(server, cfg, fed.seed)
            if dcfg.generation == "final-round":
                steps = dcfg.final_steps
            else:
                steps = dcfg.initial_steps if first else dcfg.steps_per_round
            server.trainer.train(server.corpus_model_space(), steps,
                                 server_rng)
        hats = _pmap(lambda c: _generate_for_client(server, cfg, c,
                                                    uploads[c.id], r),
                     sampled, fed.workers)
        for c, hat in zip(sampled, hats):
            acc, loss = evaluate(c, hat)
            report.add(r, c.id, "beforeFT", acc, loss)
        _pmap(lambda pair: local_update(pair[0], pair[1], cfg.local),
              list(zip(sampled, hats)), fed.workers)
        _log_phase(report, r, clients, lambda c: c.params, "afterFT",
                   fed.workers)
    return server


FINAL_PHASE = {"local-only": "afterFT", "fedavg": "beforeFT",
               "fedavg-ft": "afterFT", "diffusion": "afterFT"}


def run_federation(cfg: ExperimentConfig,
                   dataset: LabeledDataset | None = None) -> RunResult:
    cfg.validate()
    t0 = time.time()
    fed = cfg.federation
    if dataset is None:
        dataset = build_dataset(cfg.data, fed.seed)
    if len(dataset) < cfg.partition.samples_per_client + cfg.partition.test_per_client:
        raise DataError("dataset too small for the partition spec")
    shards, groups = partition_non_iid(dataset, cfg.partition, fed.n_clients,
                                       substream(fed.seed, "partition"))
    model = build_model_from_config(cfg, dataset)
    init = model.init_params(substream(fed.seed, "init"))
    clients = [ClientState(i, tr.x, tr.y, te.x, te.y, model, init.copy(),
                           rng=substream(fed.seed, "client", i))
               for i, (tr, te) in enumerate(shards)]
    report = MetricsReport()
    server = None
    if fed.method == "local-only":
        _run_local_only(cfg, clients, report)
    elif fed.method == "fedavg":
        _run_fedavg(cfg, clients, init, report, fine_tune=False)
    elif fed.method == "fedavg-ft":
        _run_fedavg(cfg, clients, init, report, fine_tune=True)
    elif fed.method == "diffusion":
        server = _run_diffusion(cfg, clients, model, init, report)
    else:
        raise ConfigError(f"unknown method {fed.method!r}")

    final_r = fed.rounds_t
    summary = {
        "version": __version__,
        "method": fed.method,
        "seed": fed.seed,
        "config_hash": config_hash(cfg),
        "n_clients": fed.n_clients,
        "rounds_t": final_r,
        "final_round": final_r,
    }
    for phase in ("beforeFT", "afterFT"):
        accs = report.phase_accuracies(final_r, phase)
        if accs:
            summary[f"final_{phase}_accuracy"] = sum(accs.values()) / len(accs)
            summary[f"final_{phase}_per_client"] = {
                str(k): v for k, v in sorted(accs.items())}
    summary["final_avg_accuracy"] = summary[
        f"final_{FINAL_PHASE[fed.method]}_accuracy"]
    summary["wall_clock_s"] = time.time() - t0
    report.summary = summary
    return RunResult(report=report, server=server, clients=clients,
                     model=model, init_params=init, dataset=dataset,
                     shards=shards, groups=groups)


def run_experiment(cfg: ExperimentConfig,
                   dataset: LabeledDataset | None = None) -> MetricsReport:
    """Execute rounds_t rounds of the configured method; returns the metrics
    report with per-round traces and the final summary."""
    return run_federation(cfg, dataset).report
