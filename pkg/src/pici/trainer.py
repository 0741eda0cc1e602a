"""Three-stage training driver.

Stage 1 (pretrain) fits encoder and decoder to masked reconstruction.
Stage 2 (train) adds the paired-view instance and cluster contrastive losses
and updates everything. Stage 3 (boost) freezes the decoder, refreshes
k-means pseudo-labels once per epoch, and adds the cross-level alignment
loss. Prediction encodes the unmasked weak view and takes the cluster head
argmax.

All randomness is derived from numpy seed sequences keyed by
(seed, stage, epoch, purpose, item, view), so a (config, seed, dataset)
triple fully determines every batch, augmentation, mask, and update.
"""

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import crosslevel
from .augment import AugmentPolicy, strong_augment, weak_augment
from .data import Dataset, batches
from .errors import ConfigError, DivergenceError
from .losses import (LossBreakdown, cluster_entropy, cluster_loss,
                     instance_loss, masked_mse_batch, pisd_loss)
from .masking import sample_mask
from .metrics import accuracy, ari, nmi
from .network import Network, save_checkpoint

STAGES = ("pretrain", "train", "boost")
_STAGE_CODE = {"pretrain": 1, "train": 2, "boost": 3}
# Purpose codes inside the seed tuples.
_P_SHUFFLE, _P_AUGMENT, _P_MASK, _P_KMEANS = 0, 1, 2, 3

METRICS_COLUMNS = ("stage", "epoch", "l_pisd", "l_ins", "l_clu", "l_cli",
                   "nmi", "acc", "ari")


def derive_seed(*parts) -> int:
    """Collapse an integer tuple into one reproducible 64-bit seed."""
    ss = np.random.SeedSequence(tuple(int(p) for p in parts))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class TrainConfig:
    e1: int = 200
    e2: int = 800
    e3: int = 50
    batch_size: int = 96
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    tau_i: float = 0.5
    tau_c: float = 1.0
    mask_ratio: float = 0.5
    mask_shared: bool = False
    include_self: bool = False
    recon_all_patches: bool = False
    column_eps: float = 0.0
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        if min(self.e1, self.e2, self.e3) < 0:
            raise ConfigError("stage epoch counts must be >= 0")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (contrastive stages need "
                              f"pairs), got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.tau_i <= 0 or self.tau_c <= 0:
            raise ConfigError("temperatures must be > 0, got "
                              f"tau_i={self.tau_i}, tau_c={self.tau_c}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        return self


def _patchify_batch(imgs: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch_dim), matching masking.patchify."""
    b, h, w, c = imgs.shape
    rows, cols = h // patch_size, w // patch_size
    x = imgs.reshape(b, rows, patch_size, cols, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, rows * cols, patch_size * patch_size * c)


def predict_dataset(net: Network, weak_views: np.ndarray, chunk: int = 128):
    """Cluster labels, instance embeddings and class tokens from unmasked
    weak views (B, H, W, 3). No augmentation randomness, no masking."""
    n = net.config.n_patches
    all_visible = np.arange(n, dtype=np.int64)
    labels, zs, hs = [], [], []
    with torch.no_grad():
        for start in range(0, len(weak_views), chunk):
            part = weak_views[start:start + chunk]
            patches = torch.from_numpy(np.ascontiguousarray(
                _patchify_batch(part, net.config.patch_size)))
            visible = torch.from_numpy(np.tile(all_visible, (len(part), 1)))
            h, _ = net.encode_batch(patches, visible)
            labels.append(net.project_cluster(h).numpy().argmax(axis=1))
            zs.append(net.project_instance(h).numpy())
            hs.append(h.numpy())
    return (np.concatenate(labels).astype(np.int64),
            np.concatenate(zs), np.concatenate(hs))


class Trainer:
    def __init__(self, network: Network, dataset: Dataset, config: TrainConfig,
                 weak_pol: AugmentPolicy, strong_pol: AugmentPolicy,
                 out_dir=None, nmi_norm: str = "sqrt",
                 append_metrics: bool = False, checkpoint_meta: dict | None = None):
        config.validate()
        self.net = network
        self.dataset = dataset
        self.cfg = config
        self.weak_pol = weak_pol
        self.strong_pol = strong_pol
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.nmi_norm = nmi_norm
        self.checkpoint_meta = dict(checkpoint_meta or {})
        self.history: list[dict] = []
        self._true = dataset.labels()
        # The weak view is deterministic; compute it once per dataset.
        self._weak = np.stack([weak_augment(img, weak_pol)
                               for img, _, _ in dataset.items])
        self._metrics_initialized = append_metrics
        self._timing_initialized = append_metrics
        self._eval_chunk = 128
        self._opt: torch.optim.Adam | None = None

    # ----- seed plumbing -----

    def _aug_seed(self, stage_code: int, epoch: int, item: int) -> int:
        return derive_seed(self.cfg.seed, stage_code, epoch, _P_AUGMENT, item)

    def _mask_seed(self, stage_code: int, epoch: int, item: int, view: int) -> int:
        if self.cfg.mask_shared:
            view = 0
        return derive_seed(self.cfg.seed, stage_code, epoch, _P_MASK, item, view)

    # ----- batch assembly -----

    def _view_tensors(self, idxs, stage_code: int, epoch: int):
        """Augment, patchify and mask one batch for both views.

        Returns per-view dicts with patch targets, visible index tensor, and
        the boolean masked grid.
        """
        n = self.net.config.n_patches
        ps = self.net.config.patch_size
        imgs_a = self._weak[idxs]
        imgs_b = np.stack([
            strong_augment(self.dataset.items[i][0], self.strong_pol,
                           self._aug_seed(stage_code, epoch, i))
            for i in idxs])
        out = {}
        for view_code, imgs in ((0, imgs_a), (1, imgs_b)):
            plans = [sample_mask(n, self.cfg.mask_ratio,
                                 self._mask_seed(stage_code, epoch, i, view_code))
                     for i in idxs]
            patches = torch.from_numpy(np.ascontiguousarray(
                _patchify_batch(imgs, ps)))
            visible = torch.from_numpy(np.stack([p.visible_idx for p in plans]))
            masked = torch.zeros(len(idxs), n, dtype=torch.bool)
            for row, plan in enumerate(plans):
                masked[row, plan.masked_idx] = True
            out[view_code] = {"patches": patches, "visible": visible,
                              "masked": masked}
        return out

    def _encode_views(self, views, with_decoder: bool, with_heads: bool):
        for v in views.values():
            h, toks = self.net.encode_batch(v["patches"], v["visible"])
            v["h"] = h
            if with_decoder:
                pred = self.net.decode_batch(h, toks, v["visible"])
                target_mask = (torch.ones_like(v["masked"])
                               if self.cfg.recon_all_patches else v["masked"])
                v["recon"] = masked_mse_batch(pred, v["patches"], target_mask)
            if with_heads:
                v["z"] = self.net.project_instance(h)
                v["c"] = self.net.project_cluster(h)

    def _check_finite(self, loss: torch.Tensor, stage: str, epoch: int, batch_index: int):
        if not bool(torch.isfinite(loss)):
            raise DivergenceError(
                f"non-finite loss in stage {stage}, epoch {epoch}, batch {batch_index}",
                stage=stage, epoch=epoch, batch_index=batch_index)

    # ----- stage epochs -----

    def begin_stage(self, stage: str):
        """Create the stage's optimizer over its update set. Adam moments
        start fresh at every stage boundary."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
        self._opt = torch.optim.Adam(
            self._stage_parameters(stage), lr=self.cfg.learning_rate,
            betas=(self.cfg.adam_beta1, self.cfg.adam_beta2),
            eps=self.cfg.adam_eps)

    def _optimizer(self) -> torch.optim.Adam:
        if self._opt is None:
            raise ConfigError("no active stage; call begin_stage() first")
        return self._opt

    def pretrain_epoch(self, epoch: int) -> LossBreakdown:
        code = _STAGE_CODE["pretrain"]
        opt = self._optimizer()
        idx_batches = batches(self.dataset, self.cfg.batch_size,
                              derive_seed(self.cfg.seed, code, epoch, _P_SHUFFLE),
                              drop_partial=False)
        total = 0.0
        for b_i, idxs in enumerate(idx_batches):
            views = self._view_tensors(idxs, code, epoch)
            self._encode_views(views, with_decoder=True, with_heads=False)
            loss = pisd_loss(views[0]["recon"], views[1]["recon"])
            self._check_finite(loss, "pretrain", epoch, b_i)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        return LossBreakdown(l_pisd=total / max(len(idx_batches), 1))

    def train_epoch(self, epoch: int) -> LossBreakdown:
        code = _STAGE_CODE["train"]
        opt = self._optimizer()
        idx_batches = batches(self.dataset, self.cfg.batch_size,
                              derive_seed(self.cfg.seed, code, epoch, _P_SHUFFLE),
                              drop_partial=True)
        sums = np.zeros(4)
        for b_i, idxs in enumerate(idx_batches):
            views = self._view_tensors(idxs, code, epoch)
            self._encode_views(views, with_decoder=True, with_heads=True)
            l_pisd = pisd_loss(views[0]["recon"], views[1]["recon"])
            l_ins = instance_loss(views[0]["z"], views[1]["z"], self.cfg.tau_i,
                                  self.cfg.include_self)
            l_clu = cluster_loss(views[0]["c"], views[1]["c"], self.cfg.tau_c,
                                 self.cfg.include_self, self.cfg.column_eps)
            loss = l_pisd + l_ins + l_clu
            self._check_finite(loss, "train", epoch, b_i)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                l_ent = cluster_entropy(views[0]["c"], views[1]["c"])
            sums += [l_pisd.item(), l_ins.item(), l_clu.item(), l_ent.item()]
        nb = max(len(idx_batches), 1)
        return LossBreakdown(l_pisd=float(sums[0] / nb), l_ins=float(sums[1] / nb),
                             l_clu=float(sums[2] / nb), l_entropy=float(sums[3] / nb))

    def boost_epoch(self, epoch: int) -> LossBreakdown:
        code = _STAGE_CODE["boost"]
        opt = self._optimizer()
        pseudo = self._refresh_pseudo_labels(epoch)
        idx_batches = batches(self.dataset, self.cfg.batch_size,
                              derive_seed(self.cfg.seed, code, epoch, _P_SHUFFLE),
                              drop_partial=True)
        sums = np.zeros(4)
        for b_i, idxs in enumerate(idx_batches):
            views = self._view_tensors(idxs, code, epoch)
            self._encode_views(views, with_decoder=False, with_heads=True)
            l_ins = instance_loss(views[0]["z"], views[1]["z"], self.cfg.tau_i,
                                  self.cfg.include_self)
            l_clu = cluster_loss(views[0]["c"], views[1]["c"], self.cfg.tau_c,
                                 self.cfg.include_self, self.cfg.column_eps)
            l_cli = crosslevel.cli_loss(pseudo[0][idxs], views[0]["c"],
                                        pseudo[1][idxs], views[1]["c"])
            loss = l_ins + l_clu + l_cli
            self._check_finite(loss, "boost", epoch, b_i)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                l_ent = cluster_entropy(views[0]["c"], views[1]["c"])
            sums += [l_ins.item(), l_clu.item(), l_cli.item(), l_ent.item()]
        nb = max(len(idx_batches), 1)
        return LossBreakdown(l_ins=float(sums[0] / nb), l_clu=float(sums[1] / nb),
                             l_cli=float(sums[2] / nb), l_entropy=float(sums[3] / nb))

    def _refresh_pseudo_labels(self, epoch: int):
        """Full-dataset pass with this epoch's views and masks, then per-view
        k-means, hard labels, optimal matching, and one-hot relabeling."""
        code = _STAGE_CODE["boost"]
        n_items = len(self.dataset)
        m = self.net.config.n_clusters
        z_all = {0: [], 1: []}
        c_all = {0: [], 1: []}
        with torch.no_grad():
            for start in range(0, n_items, self._eval_chunk):
                idxs = np.arange(start, min(start + self._eval_chunk, n_items))
                views = self._view_tensors(idxs, code, epoch)
                self._encode_views(views, with_decoder=False, with_heads=True)
                for v in (0, 1):
                    z_all[v].append(views[v]["z"].numpy())
                    c_all[v].append(views[v]["c"].numpy())
        pseudo = {}
        for v in (0, 1):
            z = np.concatenate(z_all[v])
            c = np.concatenate(c_all[v])
            km = crosslevel.kmeans(z, m,
                                   derive_seed(self.cfg.seed, code, epoch, _P_KMEANS, v),
                                   max_iters=100, tol=1e-10)
            q = crosslevel.hard_labels(c)
            w = crosslevel.match_clusters(km.labels, q, m)
            pseudo[v] = crosslevel.modify_pseudo(km.labels, w)
        return pseudo

    # ----- inference and evaluation -----

    def predict(self):
        """Cluster labels, instance embeddings and class tokens for the whole
        dataset from the unmasked weak view."""
        return predict_dataset(self.net, self._weak, self._eval_chunk)

    def evaluate(self):
        pred, _, _ = self.predict()
        return (float(nmi(self._true, pred, self.nmi_norm)),
                float(accuracy(self._true, pred)),
                float(ari(self._true, pred)))

    # ----- run loops and logging -----

    def run_stage(self, stage: str):
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
        epochs = {"pretrain": self.cfg.e1, "train": self.cfg.e2,
                  "boost": self.cfg.e3}[stage]
        step = {"pretrain": self.pretrain_epoch, "train": self.train_epoch,
                "boost": self.boost_epoch}[stage]
        self.begin_stage(stage)
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            breakdown = step(epoch)
            wall = time.perf_counter() - t0
            scores = self.evaluate()
            self.history.append({"stage": stage, "epoch": epoch,
                                 "losses": breakdown, "scores": scores})
            self._append_metrics(stage, epoch, breakdown, scores)
            self._append_timing(stage, epoch, wall)
            if self.cfg.checkpoint_every and epoch % self.cfg.checkpoint_every == 0:
                self._save(f"checkpoint_{stage}_{epoch:05d}.pici", stage, epoch)
        self._opt = None
        self._save(f"checkpoint_{stage}.pici", stage, epochs)

    def run(self, stages=STAGES):
        order = [s for s in STAGES if s in stages]
        if list(stages) != order:
            raise ConfigError(f"stages must run in order {STAGES}, got {tuple(stages)}")
        for stage in order:
            self.run_stage(stage)

    def _stage_parameters(self, stage: str):
        if stage == "pretrain":
            return self.net.encoder_parameters() + self.net.decoder_parameters()
        if stage == "train":
            return list(self.net.parameters())
        return (self.net.encoder_parameters() + self.net.instance_parameters()
                + self.net.cluster_parameters())

    def _save(self, filename: str, stage: str, epoch: int):
        if self.out_dir is None:
            return
        meta = dict(self.checkpoint_meta)
        meta.update({
            "stage": stage,
            "epoch": epoch,
            "normalize_mean": list(self.weak_pol.normalize_mean),
            "normalize_std": list(self.weak_pol.normalize_std),
        })
        save_checkpoint(self.out_dir / filename, self.net, meta)

    def _append_metrics(self, stage, epoch, breakdown: LossBreakdown, scores):
        if self.out_dir is None:
            return
        path = self.out_dir / "metrics.csv"
        if not self._metrics_initialized or not path.exists():
            path.write_text(",".join(METRICS_COLUMNS) + "\n", encoding="utf-8")
            self._metrics_initialized = True
        vals = [breakdown.l_pisd, breakdown.l_ins, breakdown.l_clu,
                breakdown.l_cli, *scores]
        row = f"{stage},{epoch}," + ",".join(repr(float(v)) for v in vals)
        with open(path, "a", encoding="utf-8") as f:
            f.write(row + "\n")

    def _append_timing(self, stage, epoch, wall: float):
        if self.out_dir is None:
            return
        path = self.out_dir / "timing.csv"
        if not self._timing_initialized or not path.exists():
            path.write_text("stage,epoch,wall_seconds\n", encoding="utf-8")
            self._timing_initialized = True
        with open(path, "a", encoding="utf-8") as f:
            f.write(f"{stage},{epoch},{wall:.6f}\n")
