"""Training orchestration: the batch loop, neighborhood-target refresh, the
cross-view contrastive memory, checkpointing, and ablation switches.

Gradient routing is deliberate and worth spelling out once. The batch target
used in the distribution-matching term is

    d_now = omega * stored_target  +  (1 - omega) * fresh_target

where stored_target is a constant (last epoch's buffer) and fresh_target is
built from detached features, detached neighbor predictions, and live
contribution scores. The distribution term therefore trains (a) the
classifier through its predictions and (b) the contribution scorers through
the fresh targets, and nothing else. The buffer itself is advanced once per
epoch from the accumulated fresh targets, last visit winning when replacement
sampling revisits a sample.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .contrastive import MemoryBank, build_pairs, el_loss, pseudo_labels
from .core import ConfigError, HyperParams, NumericError, format_kv, one_hot
from .data import Dataset, SamplerSchedule, progressive_sampling_weights, sample_batch
from .evaluation import (EvalReport, ce_histogram_by_noise, evaluate, mean_js,
                         per_sample_ce, predict_probs, write_report)
from .losses import LossReport, ce_loss, combine, kl_loss, landmark_mse, total_loss
from .models import (DTYPE, DualBackboneConfig, DualViewModel, as_model_input,
                     generator_from_seed)
from .noise import NoiseLedger
from .targets import (ContributionScorer, TargetStore, aggregate_targets,
                      contribution_scores, cosine_similarity_matrix, knn_matrix)

_FLAG_TOKENS = {
    "ld": "use_ld",
    "lm": "use_lm_in_lde",
    "el": "use_el",
    "pl": "use_pseudo_labels",
}


@dataclass(frozen=True)
class AblationFlags:
    """Switches for the mechanisms layered on top of the CE+MSE baseline.

    use_ld enables neighborhood label-distribution targets, use_lm_in_lde adds
    the landmark space to the neighbor search, use_el enables the cross-view
    contrastive term, and use_pseudo_labels selects positives from target
    confidence instead of the given labels.
    """

    use_ld: bool = False
    use_lm_in_lde: bool = False
    use_el: bool = False
    use_pseudo_labels: bool = False

    def __post_init__(self):
        if self.use_lm_in_lde and not self.use_ld:
            raise ConfigError("use_lm_in_lde requires use_ld")
        if self.use_pseudo_labels and not self.use_el:
            raise ConfigError("use_pseudo_labels requires use_el")

    @classmethod
    def baseline(cls) -> "AblationFlags":
        return cls()

    @classmethod
    def full(cls) -> "AblationFlags":
        return cls(use_ld=True, use_lm_in_lde=True, use_el=True, use_pseudo_labels=True)

    @classmethod
    def from_tokens(cls, text: str) -> "AblationFlags":
        """Parse 'baseline', 'full', or a comma list out of {ld,lm,el,pl}."""
        text = text.strip().lower()
        if text in ("baseline", ""):
            return cls.baseline()
        if text == "full":
            return cls.full()
        kwargs = {}
        for token in text.split(","):
            token = token.strip()
            if token not in _FLAG_TOKENS:
                raise ConfigError(f"unknown ablation token '{token}' "
                                  f"(expected one of {sorted(_FLAG_TOKENS)})")
            kwargs[_FLAG_TOKENS[token]] = True
        return cls(**kwargs)

    def tokens(self) -> str:
        on = [tok for tok, field in _FLAG_TOKENS.items() if getattr(self, field)]
        return ",".join(on) if on else "baseline"


@dataclass(frozen=True)
class TrainRunConfig:
    """Everything a run needs beyond the datasets themselves."""

    hp: HyperParams
    flags: AblationFlags
    out_dir: str | Path
    hidden_dims: tuple[int, ...] = (128, 128)
    feature_dim_u: int = 64
    feature_dim_v: int = 64
    proj_dim: int = 64
    momentum: float = 0.99
    bank_capacity: int = 1024
    # 1 writes a checkpoint after every epoch; 0 keeps only the final one.
    checkpoint_every: int = 1
    input_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.bank_capacity < 1:
            raise ConfigError(f"bank_capacity must be >= 1, got {self.bank_capacity}")

    def snapshot_text(self) -> str:
        kv = dict(asdict(self.hp))
        kv["ablation"] = self.flags.tokens()
        kv["hidden_dims"] = ",".join(str(d) for d in self.hidden_dims)
        for key in ("feature_dim_u", "feature_dim_v", "proj_dim", "momentum",
                    "bank_capacity", "checkpoint_every"):
            kv[key] = getattr(self, key)
        if self.input_shape is not None:
            kv["input_shape"] = ",".join(str(d) for d in self.input_shape)
        return format_kv(kv)


def lr_at(step: int, total_steps: int, lr0: float) -> float:
    """Linear decay from lr0 at step 0 to 0 at total_steps."""
    return lr0 * (1.0 - step / total_steps)


def _scalar(value) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


class Trainer:
    """Owns all mutable training state for one run."""

    def __init__(self, cfg: TrainRunConfig, train_ds: Dataset):
        self.cfg = cfg
        self.hp = cfg.hp
        self.flags = cfg.flags
        self.train_ds = train_ds
        self.run_dir = Path(cfg.out_dir)

        model_cfg = self._model_config(cfg, train_ds)

        # Two independent child streams: one for batch sampling, one feeding
        # parameter initialization. Keeps either reproducible in isolation.
        children = np.random.SeedSequence(self.hp.seed).spawn(2)
        self.sampler_rng = np.random.default_rng(children[0])
        init_seed = int(children[1].generate_state(1, dtype=np.uint64)[0])
        gen = generator_from_seed(init_seed)

        self.model = DualViewModel(model_cfg, gen)
        self.scorer_u = self.scorer_v = None
        if self.flags.use_ld:
            self.scorer_u = ContributionScorer(cfg.feature_dim_u, gen)
            self.scorer_v = ContributionScorer(cfg.feature_dim_v, gen)

        params = list(self.model.online_parameters())
        if self.scorer_u is not None:
            params += list(self.scorer_u.parameters())
            params += list(self.scorer_v.parameters())
        self.optimizer = torch.optim.Adam(params, lr=self.hp.lr)

        self.store = TargetStore.from_labels(train_ds.ids, train_ds.labels,
                                             train_ds.num_classes)
        self.bank_u = self.bank_v = None
        if self.flags.use_el:
            self.bank_u = MemoryBank(cfg.bank_capacity, cfg.proj_dim)
            self.bank_v = MemoryBank(cfg.bank_capacity, cfg.proj_dim)

        self.schedule = SamplerSchedule.from_dataset(train_ds, self.hp.epochs)
        self.steps_per_epoch = math.ceil(len(train_ds) / self.hp.batch_size)
        self.total_steps = self.hp.epochs * self.steps_per_epoch
        self.global_step = 0
        self.completed_epochs = 0

    @staticmethod
    def _model_config(cfg: TrainRunConfig, train_ds: Dataset) -> DualBackboneConfig:
        if cfg.input_shape is not None:
            if int(np.prod(cfg.input_shape)) != train_ds.input_dim:
                raise ConfigError(f"input_shape {cfg.input_shape} does not flatten "
                                  f"to dataset input_dim {train_ds.input_dim}")
            dims = {"input_shape": cfg.input_shape}
        else:
            dims = {"input_dim": train_ds.input_dim}
        return DualBackboneConfig(num_classes=train_ds.num_classes,
                                  landmark_dim=2 * train_ds.landmark_count,
                                  hidden_dims=cfg.hidden_dims,
                                  feature_dim_u=cfg.feature_dim_u,
                                  feature_dim_v=cfg.feature_dim_v,
                                  proj_dim=cfg.proj_dim,
                                  momentum=cfg.momentum,
                                  **dims)

    def train_epoch(self, epoch: int) -> list[LossReport]:
        """Run one epoch of sampled batches, then fold the accumulated fresh
        targets into the buffer."""
        weights = progressive_sampling_weights(epoch, self.schedule)
        fresh: dict[int, np.ndarray] = {}
        reports = []
        for _ in range(self.steps_per_epoch):
            idx = sample_batch(self.train_ds, weights, self.hp.batch_size,
                               self.sampler_rng)
            reports.append(self._train_step(idx, fresh))
        if self.flags.use_ld:
            self.store.ema_update(fresh, self.hp.omega)
        self.completed_epochs = epoch + 1
        return reports

    def _train_step(self, idx: np.ndarray, fresh: dict[int, np.ndarray]) -> LossReport:
        hp, flags = self.hp, self.flags
        ids = self.train_ds.ids[idx]
        diag: dict[str, np.ndarray] = {"batch_ids": np.asarray(ids)}
        try:
            x = as_model_input(self.train_ds.inputs[idx], self.model.cfg)
            labels_np = self.train_ds.labels[idx]
            labels = torch.as_tensor(labels_np, dtype=torch.int64)
            lm_truth = torch.as_tensor(self.train_ds.landmarks[idx], dtype=DTYPE)

            u, logits = self.model.expression_logits(x)
            probs = F.softmax(logits, dim=1)
            v, lm_pred = self.model.forward_landmark(x)

            ce = ce_loss(probs, labels)
            lm = landmark_mse(lm_pred, lm_truth)
            kl = 0.0
            el = 0.0
            pseudo_source: np.ndarray | None = None

            if flags.use_ld:
                u_d, v_d, p_d = u.detach(), v.detach(), probs.detach()
                sim_u = cosine_similarity_matrix(u_d.numpy())
                diag["sim_u"] = sim_u
                nb_u = knn_matrix(sim_u, hp.k_neighbors)
                sc_u = contribution_scores(self.scorer_u, u_d, nb_u)
                nb_v = sc_v = None
                if flags.use_lm_in_lde:
                    sim_v = cosine_similarity_matrix(v_d.numpy())
                    diag["sim_v"] = sim_v
                    nb_v = knn_matrix(sim_v, hp.k_neighbors)
                    sc_v = contribution_scores(self.scorer_v, v_d, nb_v)
                d_fresh = aggregate_targets(p_d, nb_u, sc_u, nb_v, sc_v)
                d_prev = torch.as_tensor(self.store.get(ids), dtype=DTYPE)
                d_now = hp.omega * d_prev + (1.0 - hp.omega) * d_fresh
                diag["targets"] = d_now.detach().numpy()
                kl = kl_loss(d_now, probs)
                fresh_np = d_fresh.detach().numpy()
                for row, sid in enumerate(ids):
                    fresh[int(sid)] = fresh_np[row]
                pseudo_source = d_now.detach().numpy()

            if flags.use_el:
                if flags.use_pseudo_labels:
                    src = pseudo_source if pseudo_source is not None else self.store.get(ids)
                    batch_pseudo = pseudo_labels(src, hp.delta)
                else:
                    batch_pseudo = labels_np.astype(np.int64)
                q_u, q_v = self.model.query_projections(u, v)
                k_u, k_v = self.model.key_projections(x)
                bank_u_keys, bank_labels = self.bank_u.snapshot()
                bank_v_keys, _ = self.bank_v.snapshot()
                pairs = build_pairs(batch_pseudo, bank_labels)
                el = el_loss(q_u, q_v,
                             torch.cat([k_u, bank_u_keys]),
                             torch.cat([k_v, bank_v_keys]),
                             pairs, hp.tau)

            total = combine(ce, lm, kl, el, alpha=hp.alpha, beta=hp.beta)
            report = total_loss(_scalar(ce), _scalar(lm), _scalar(kl), _scalar(el),
                                alpha=hp.alpha, beta=hp.beta)
        except NumericError as err:
            path = self._dump_failure(diag)
            raise NumericError(f"{err} (diagnostics dumped to {path})") from err

        lr = lr_at(self.global_step, self.total_steps, hp.lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.global_step += 1

        if flags.use_el:
            self.model.momentum_update()
            self.bank_u.enqueue(k_u, batch_pseudo)
            self.bank_v.enqueue(k_v, batch_pseudo)
        return report

    def _dump_failure(self, diag: dict[str, np.ndarray]) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "numeric-failure.npz"
        np.savez(path, **diag)
        return path

    def checkpoint_state(self) -> dict:
        state = {
            "epoch": self.completed_epochs,
            "global_step": self.global_step,
            "config": {"hp": asdict(self.hp), "flags": asdict(self.flags)},
            "model_cfg": asdict(self.model.cfg),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "store": self.store.state(),
            "sampler": self.sampler_rng.bit_generator.state,
        }
        if self.scorer_u is not None:
            state["scorer_u"] = self.scorer_u.state_dict()
            state["scorer_v"] = self.scorer_v.state_dict()
        if self.bank_u is not None:
            state["bank_u"] = self.bank_u.state()
            state["bank_v"] = self.bank_v.state()
        return state

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.checkpoint_state(), path)
        return path

    def load_checkpoint(self, path: str | Path) -> None:
        state = torch.load(path, weights_only=False)
        saved = state["config"]
        current = {"hp": asdict(self.hp), "flags": asdict(self.flags)}
        if saved != current:
            raise ConfigError(f"checkpoint config {saved} does not match run config {current}")
        self.completed_epochs = int(state["epoch"])
        self.global_step = int(state["global_step"])
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.store = TargetStore.from_state(state["store"])
        self.sampler_rng.bit_generator.state = state["sampler"]
        if self.scorer_u is not None:
            self.scorer_u.load_state_dict(state["scorer_u"])
            self.scorer_v.load_state_dict(state["scorer_v"])
        if self.bank_u is not None:
            self.bank_u = MemoryBank.from_state(state["bank_u"])
            self.bank_v = MemoryBank.from_state(state["bank_v"])


def load_model(checkpoint_path: str | Path) -> DualViewModel:
    """Rebuild a trained model from a checkpoint, for standalone evaluation."""
    state = torch.load(checkpoint_path, weights_only=False)
    if "model_cfg" not in state:
        raise ConfigError(f"{checkpoint_path} lacks the architecture record")
    raw = dict(state["model_cfg"])
    raw["hidden_dims"] = tuple(raw["hidden_dims"])
    if raw.get("input_shape") is not None:
        raw["input_shape"] = tuple(raw["input_shape"])
    model = DualViewModel(DualBackboneConfig(**raw), generator_from_seed(0))
    model.load_state_dict(state["model"])
    model.eval()
    return model


@dataclass(frozen=True, eq=False)
class TrainResult:
    run_dir: Path
    report: EvalReport
    model: DualViewModel
    store: TargetStore

    @property
    def accuracy(self) -> float:
        return self.report.accuracy


def _append_log(path: Path, reports: list[LossReport], first_step: int,
                write_header: bool) -> None:
    with path.open("a" if not write_header else "w") as fh:
        if write_header:
            fh.write("step,ce,kl,lm,el,total\n")
        for offset, report in enumerate(reports):
            ce, kl, lm, el, total = report.row()
            fh.write(f"{first_step + offset},{ce!r},{kl!r},{lm!r},{el!r},{total!r}\n")


def _train_diagnostics(model: DualViewModel, train_ds: Dataset, store: TargetStore,
                       ledger: NoiseLedger):
    probs = predict_probs(model, train_ds)
    ce = per_sample_ce(probs, train_ds.labels)
    split = ce_histogram_by_noise(train_ds.ids.tolist(), ce, ledger)
    num_classes = train_ds.num_classes
    clean = {int(i): one_hot(ledger.entries[int(i)].original, num_classes)
             for i in train_ds.ids}
    injected = {int(i): one_hot(ledger.entries[int(i)].injected, num_classes)
                for i in train_ds.ids}
    js = {
        "targets_vs_clean": mean_js(clean, store.as_dict()),
        "injected_vs_clean": mean_js(clean, injected),
    }
    return split, js


def fit(cfg: TrainRunConfig, train_ds: Dataset, test_ds: Dataset,
        ledger: NoiseLedger | None = None,
        resume_from: str | Path | None = None) -> TrainResult:
    """Train to completion and evaluate.

    Writes into cfg.out_dir: config.snapshot, log.csv (one row per step),
    ckpt-{epoch} files, and report/. When a noise ledger is supplied the
    report gains the clean-vs-flipped loss split and divergence scores of the
    learned targets against the pre-noise labels.
    """
    trainer = Trainer(cfg, train_ds)
    if test_ds.num_classes != train_ds.num_classes:
        raise ConfigError("train and test class counts differ")
    run_dir = trainer.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)

    resuming = resume_from is not None
    if resuming:
        trainer.load_checkpoint(resume_from)
    (run_dir / "config.snapshot").write_text(cfg.snapshot_text())

    log_path = run_dir / "log.csv"
    wrote_header = resuming and log_path.exists()
    for epoch in range(trainer.completed_epochs, cfg.hp.epochs):
        first_step = trainer.global_step
        reports = trainer.train_epoch(epoch)
        _append_log(log_path, reports, first_step, write_header=not wrote_header)
        wrote_header = True
        done = epoch + 1
        if cfg.checkpoint_every and (done % cfg.checkpoint_every == 0 or done == cfg.hp.epochs):
            trainer.save_checkpoint(run_dir / f"ckpt-{done}")
    if not cfg.checkpoint_every:
        trainer.save_checkpoint(run_dir / f"ckpt-{cfg.hp.epochs}")

    report = evaluate(trainer.model, test_ds)
    if ledger is not None:
        split, js = _train_diagnostics(trainer.model, train_ds, trainer.store, ledger)
        report = report.with_diagnostics(ce_split=split, js_scores=js)
    write_report(report, run_dir / "report")
    return TrainResult(run_dir=run_dir, report=report,
                       model=trainer.model, store=trainer.store)
