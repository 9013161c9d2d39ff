"""Training loop: augmentation-on-the-fly batches, AdamW with cosine decay
and a reduced backbone learning rate, query pruning, metrics logging, and
checkpointing. Also hosts the sklearn-style LaneDetector estimator."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .base import ParamMixin
from .config import Config, preset_config, write_config
from .errors import BadCost, EmptyTile, NotFitted, TrainingDiverged
from .evaluation import evaluate_tiles
from .losses import LossReport, LossWeights, loss_total
from .model import LaneNetwork, ModelConfig, save_checkpoint
from .raster import rasterize
from .tensor import Tensor
from .tiling import AugmentParams, Tile, augment


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr at step 0 to exactly 0 at the final step."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t))


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups."""

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
        lr_scale_fn=None,
    ):
        self.params = named_params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scale = {
            name: (lr_scale_fn(name) if lr_scale_fn else 1.0) for name, _ in named_params
        }
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            step_lr = lr * self.lr_scale[name]
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - step_lr * (update + self.weight_decay * p.data)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    total = np.sqrt(total)
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale  # grads may be borrowed; never in place
    return float(total)


def model_config_from(cfg: Config) -> ModelConfig:
    return ModelConfig(
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        ffn_dim=cfg.ffn_dim,
        n_encoder_layers=cfg.n_encoder_layers,
        n_decoder_layers=cfg.n_decoder_layers,
        n_queries=cfg.n_queries,
        n_o2m_queries=cfg.n_o2m_queries,
        m_points=cfg.m_points,
        backbone_width=cfg.backbone_width,
        dropout=cfg.dropout,
        extent=cfg.extent,
        seed=cfg.seed,
    )


def _augment_seed(base_seed: int, step: int, tile_idx: int) -> int:
    ss = np.random.SeedSequence([base_seed, step, tile_idx])
    return int(ss.generate_state(1)[0])


@dataclass
class TrainResult:
    model: LaneNetwork
    metrics_path: str | None
    final_report: LossReport | None
    active_o2o: np.ndarray
    prune_events: list[tuple[int, list[int]]] = field(default_factory=list)


class Trainer:
    """Stateful training driver; one instance per run."""

    def __init__(
        self,
        cfg: Config,
        train_tiles: list[Tile],
        val_tiles: list[Tile] | None = None,
        out_dir: str | None = None,
    ):
        if not train_tiles:
            raise EmptyTile("no training tiles")
        self.cfg = cfg
        self.train_tiles = train_tiles
        self.val_tiles = val_tiles or []
        self.out_dir = out_dir
        self.model = LaneNetwork(model_config_from(cfg))
        self.optimizer = AdamW(
            list(self.model.named_parameters()),
            weight_decay=cfg.weight_decay,
            lr_scale_fn=lambda name: cfg.backbone_lr_factor
            if name.startswith("backbone.")
            else 1.0,
        )
        self.weights = LossWeights(
            lambda_class=cfg.lambda_class,
            lambda_point=cfg.lambda_point,
            lambda_dir=cfg.lambda_dir,
            lambda_o2o=cfg.lambda_o2o,
            lambda_o2m=cfg.lambda_o2m,
            lambda_aux=cfg.lambda_aux,
            focal_alpha=cfg.focal_alpha,
            focal_gamma=cfg.focal_gamma,
            o2m_repeat=cfg.o2m_repeat,
        )
        self.aug_params = AugmentParams(
            p_each=cfg.p_augment,
            noise_sigma=cfg.aug_noise_sigma,
            shift_range=cfg.aug_shift_range,
            tau_align=cfg.tau_align,
        )
        n_total = cfg.n_queries + cfg.n_o2m_queries
        self.active_o2o = np.arange(cfg.n_queries)
        self.o2m_indices = np.arange(cfg.n_queries, n_total)
        self.query_score_sum = np.zeros(cfg.n_queries)
        self.query_score_count = 0
        self.prune_events: list[tuple[int, list[int]]] = []
        self._raster_cache: dict[int, np.ndarray] = {}

    # -- data -------------------------------------------------------------

    def _tile_raster(self, tile_idx: int, step: int) -> np.ndarray:
        cfg = self.cfg
        tile = self.train_tiles[tile_idx]
        if cfg.augment:
            try:
                tile = augment(tile, _augment_seed(cfg.seed, step, tile_idx), self.aug_params)
            except EmptyTile:
                tile = self.train_tiles[tile_idx]  # deterministic fallback
            return (
                rasterize(
                    tile, cfg.raster_size, cfg.raster_size,
                    v_max=cfg.v_max, intensity_scale=cfg.intensity_scale,
                ).channels,
                tile,
            )
        if tile_idx not in self._raster_cache:
            self._raster_cache[tile_idx] = rasterize(
                tile, cfg.raster_size, cfg.raster_size,
                v_max=cfg.v_max, intensity_scale=cfg.intensity_scale,
            ).channels
        return self._raster_cache[tile_idx], tile

    def _batches(self):
        cfg = self.cfg
        step = 0
        epoch = 0
        n = len(self.train_tiles)
        while step < cfg.n_steps:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919, epoch]))
            order = rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                if step >= cfg.n_steps:
                    return
                idx = order[lo : lo + cfg.batch_size]
                if len(idx) < cfg.batch_size and n >= cfg.batch_size:
                    idx = np.concatenate([idx, order[: cfg.batch_size - len(idx)]])
                yield step, idx
                step += 1
            epoch += 1

    # -- pruning ------------------------------------------------------------

    def _update_query_scores(self, logits_data: np.ndarray):
        z = logits_data - logits_data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p_obj = e[..., 1] / e.sum(axis=-1)  # (B, n_active_o2o)
        mean_p = p_obj.mean(axis=0)
        self.query_score_sum[self.active_o2o] += mean_p
        self.query_score_count += 1

    def _maybe_prune(self, step: int):
        cfg = self.cfg
        if not cfg.query_pruning or self.prune_events:
            return
        warmup = int(cfg.prune_warmup_frac * cfg.n_steps)
        if step + 1 < warmup or self.query_score_count == 0:
            return
        means = self.query_score_sum[self.active_o2o] / self.query_score_count
        keep_n = min(cfg.prune_keep, len(self.active_o2o))
        # highest running-mean confidence stays; ties keep the lower index
        order = np.lexsort((self.active_o2o, -means))
        kept = np.sort(self.active_o2o[order[:keep_n]])
        dropped = sorted(set(self.active_o2o) - set(kept))
        self.active_o2o = kept
        self.prune_events.append((step + 1, [int(d) for d in dropped]))

    # -- loop -----------------------------------------------------------------

    def run(self) -> TrainResult:
        cfg = self.cfg
        metrics_path = None
        metrics_f = None
        eval_f = None
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            write_config(cfg, os.path.join(self.out_dir, "resolved.cfg"))
            metrics_path = os.path.join(self.out_dir, "metrics.tsv")
            metrics_f = open(metrics_path, "w")
            if self.val_tiles and cfg.eval_every > 0:
                eval_f = open(os.path.join(self.out_dir, "eval_log.tsv"), "w")
                eval_f.write("step\tap\tap_c\tap_ld\n")

        self.model.train()
        report = None
        try:
            for step, idx in self._batches():
                lr = cosine_lr(step, cfg.n_steps, cfg.lr)
                rasters, tiles = [], []
                for tile_idx in idx:
                    channels, tile = self._tile_raster(int(tile_idx), step)
                    rasters.append(channels)
                    tiles.append(tile)
                x = Tensor(np.stack(rasters).astype(np.float32))
                active = (
                    np.concatenate([self.active_o2o, self.o2m_indices])
                    if len(self.active_o2o) < cfg.n_queries
                    else None
                )
                outputs = self.model.forward(
                    x, active_queries=active, aux_head_slice=len(self.active_o2o)
                )

                n_o2o = len(self.active_o2o)
                batch_loss = None
                report = None
                try:
                    for b, tile in enumerate(tiles):
                        total, rep = loss_total(
                            outputs, tile.gt_lanes, n_o2o, self.weights, sample=b
                        )
                        batch_loss = total if batch_loss is None else batch_loss + total
                        report = rep if report is None else _merge_reports(report, rep)
                except BadCost as exc:
                    raise TrainingDiverged(
                        f"non-finite predictions at step {step}: {exc}; tiles="
                        f"{[t.tile_id for t in tiles]} seed={cfg.seed}"
                    ) from exc
                batch_loss = batch_loss * (1.0 / len(tiles))
                report = _scale_report(report, 1.0 / len(tiles))

                if not np.isfinite(batch_loss.item()):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}: tiles="
                        f"{[t.tile_id for t in tiles]} seed={cfg.seed}"
                    )

                self.optimizer.zero_grad()
                batch_loss.backward()
                clip_grad_norm(self.model.parameters(), cfg.grad_clip)
                self.optimizer.step(lr)

                self._update_query_scores(outputs[-1]["logits"].data[:, :n_o2o])
                self._maybe_prune(step)

                if metrics_f is not None:
                    metrics_f.write(
                        f"{step}\t{lr:.8f}\t{report.loss_class:.6f}\t"
                        f"{report.loss_point:.6f}\t{report.loss_dir:.6f}\t"
                        f"{report.loss_o2o:.6f}\t{report.loss_o2m:.6f}\t"
                        f"{report.loss_aux:.6f}\t{report.total:.6f}\n"
                    )

                if (
                    eval_f is not None
                    and cfg.eval_every > 0
                    and (step + 1) % cfg.eval_every == 0
                ):
                    result, _ = evaluate_tiles(
                        self.model, self.val_tiles, cfg.raster_size,
                        v_max=cfg.v_max, thresholds=cfg.thresholds(),
                        intensity_scale=cfg.intensity_scale,
                    )
                    eval_f.write(
                        f"{step + 1}\t{result.ap:.6f}\t{result.ap_c:.6f}\t{result.ap_ld:.6f}\n"
                    )
                    self.model.train()
        finally:
            if metrics_f is not None:
                metrics_f.close()
            if eval_f is not None:
                eval_f.close()

        self.model.eval()
        if self.out_dir:
            save_checkpoint(
                self.model,
                os.path.join(self.out_dir, "checkpoint.lgcp"),
                os.path.join(self.out_dir, "manifest.txt"),
            )
        return TrainResult(
            model=self.model,
            metrics_path=metrics_path,
            final_report=report,
            active_o2o=self.active_o2o.copy(),
            prune_events=self.prune_events,
        )


def _merge_reports(a: LossReport, b: LossReport) -> LossReport:
    return LossReport(
        loss_class=a.loss_class + b.loss_class,
        loss_point=a.loss_point + b.loss_point,
        loss_dir=a.loss_dir + b.loss_dir,
        loss_o2o=a.loss_o2o + b.loss_o2o,
        loss_o2m=a.loss_o2m + b.loss_o2m,
        loss_aux=a.loss_aux + b.loss_aux,
        total=a.total + b.total,
        weights=a.weights,
    )


def _scale_report(r: LossReport, s: float) -> LossReport:
    return LossReport(
        loss_class=r.loss_class * s,
        loss_point=r.loss_point * s,
        loss_dir=r.loss_dir * s,
        loss_o2o=r.loss_o2o * s,
        loss_o2m=r.loss_o2m * s,
        loss_aux=r.loss_aux * s,
        total=r.total * s,
        weights=r.weights,
    )


def train_loop(
    train_tiles: list[Tile],
    cfg: Config,
    val_tiles: list[Tile] | None = None,
    out_dir: str | None = None,
) -> TrainResult:
    return Trainer(cfg, train_tiles, val_tiles, out_dir).run()


# ---------------------------------------------------------------------------
# Estimator facade
# ---------------------------------------------------------------------------


class LaneDetector(ParamMixin):
    """Tiles-in, lanes-out detector with a fit/predict/score interface.

    ``preset`` picks the config scale; explicit constructor arguments (when
    not None) override the preset, and ``overrides`` handles the long tail
    of config keys.
    """

    def __init__(
        self,
        preset: str = "desk",
        n_steps: int | None = None,
        batch_size: int | None = None,
        lr: float | None = None,
        augment: bool | None = None,
        query_pruning: bool | None = None,
        seed: int = 0,
        out_dir: str | None = None,
        overrides: dict | None = None,
    ):
        self.preset = preset
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.augment = augment
        self.query_pruning = query_pruning
        self.seed = seed
        self.out_dir = out_dir
        self.overrides = overrides

    def build_config(self) -> Config:
        from dataclasses import replace

        cfg = preset_config(self.preset)
        explicit = {
            key: getattr(self, key)
            for key in ("n_steps", "batch_size", "lr", "augment", "query_pruning")
            if getattr(self, key) is not None
        }
        cfg = replace(cfg, seed=self.seed, **explicit)
        if self.overrides:
            from .config import apply_overrides

            cfg = apply_overrides(cfg, self.overrides)
        return cfg

    def fit(self, tiles: list[Tile], val_tiles: list[Tile] | None = None):
        cfg = self.build_config()
        result = train_loop(tiles, cfg, val_tiles=val_tiles, out_dir=self.out_dir)
        self.model_ = result.model
        self.config_ = cfg
        self.result_ = result
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFitted("call fit() before predict()/score()")

    def predict(self, tiles: list[Tile]):
        self._check_fitted()
        cfg = self.config_
        preds = []
        for tile in tiles:
            raster = rasterize(
                tile, cfg.raster_size, cfg.raster_size,
                v_max=cfg.v_max, intensity_scale=cfg.intensity_scale,
            )
            preds.append(self.model_.predict(raster))
        return preds

    def score(self, tiles: list[Tile]) -> float:
        """Chamfer-AP of the fitted model on ``tiles``."""
        self._check_fitted()
        cfg = self.config_
        result, _ = evaluate_tiles(
            self.model_, tiles, cfg.raster_size,
            v_max=cfg.v_max, thresholds=cfg.thresholds(),
            intensity_scale=cfg.intensity_scale,
        )
        return result.ap
