"""Staged training (identity-encoder pretrain, warper pretrain, content,
adversarial), checkpoint/metric plumbing, inference and PSNR evaluation.

The adversarial stage alternates n_critic critic updates (fresh batch and
fresh interpolation draws each) with one generator update whose gradients
flow jointly through the generator and the warper while the identity
encoder stays frozen.  Everything is driven by one seeded RNG stream per
stage, so a fixed (seed, config, dataset) reproduces every logged loss and
every checkpoint byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .functional import bicubic_resize
from .losses import (LossWeights, PAPER_WEIGHTS, adversarial_loss, bce_loss,
                     content_loss, critic_loss, gradient_penalty,
                     identity_loss, total_loss)
from .networks import (ArchConfig, ModelBundle, cnet_forward, gnet_forward,
                       inet_embed, siamese_predict, wnet_forward)
from .optim import ADAM_ADVERSARIAL, ADAM_NONADVERSARIAL, Adam
from .synthdata import (SynthDataset, depreprocess_gt, preprocess_input,
                        sample_triple, to_uint8)
from .tensor import Tensor, ValidationError, backward, no_grad
from .warp import warp_image

STAGES = ("inet-pretrain", "wnet-pretrain", "content", "adversarial")
_STAGE_CODES = {"inet-pretrain": 11, "wnet-pretrain": 22,
                "content": 33, "adversarial": 44}
_EVAL_STREAM = 909


@dataclass(frozen=True)
class StageConfig:
    stage: str
    lr: float = 1e-4
    batch_size: int = 4
    steps: Optional[int] = None
    epochs: Optional[float] = None
    betas: Optional[tuple] = None
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    n_critic: int = 5
    seed: int = 0
    checkpoint_interval: int = 0       # 0: checkpoint only at stage end
    eval_interval: int = 0             # 0: no validation-peak early stopping
    patience: int = 10

    def validate(self) -> "StageConfig":
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if (self.steps is None) == (self.epochs is None):
            raise ValidationError("exactly one of steps/epochs must be set")
        if self.stage == "content" and (self.weights.lambda_adv != 0
                                        or self.weights.lambda_id != 0):
            raise ValidationError(
                "content stage requires lambda_adv == lambda_id == 0, got "
                f"{self.weights}")
        if self.stage == "adversarial" and self.n_critic < 1:
            raise ValidationError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValidationError("batch_size must be >= 1 and lr > 0")
        self.weights.validate()
        return self

    def resolved_betas(self) -> tuple:
        if self.betas is not None:
            return tuple(self.betas)
        preset = ADAM_ADVERSARIAL if self.stage == "adversarial" else ADAM_NONADVERSARIAL
        return preset[1], preset[2]

    @staticmethod
    def adversarial_default(seed: int = 0, **over) -> "StageConfig":
        return StageConfig(stage="adversarial", weights=PAPER_WEIGHTS,
                           seed=seed, **over).validate()


def resolve_steps(cfg: StageConfig, dataset: SynthDataset) -> int:
    if cfg.steps is not None:
        return cfg.steps
    n_imgs = sum(len(dataset.images[k]) for k in dataset.identities("train"))
    return max(1, math.ceil(cfg.epochs * n_imgs / cfg.batch_size))


# -- batching helpers ----------------------------------------------------------

def _stack(arrs) -> Tensor:
    return Tensor(np.stack([np.asarray(a, dtype=np.float32) for a in arrs]))


def _gt_to_input_space(img_pm1: Tensor, mean: np.ndarray) -> Tensor:
    """Map a GT-range tensor into the encoder/critic input preprocessing."""
    half = T.mul(T.add(img_pm1, 1.0), 0.5)
    mc = np.broadcast_to(mean.reshape(1, 3, 1, 1), img_pm1.shape)
    return T.sub(half, Tensor(np.ascontiguousarray(mc, dtype=np.float32)))


def generator_forward(params, arch: ArchConfig, i_lr: Tensor,
                      i_gi: Optional[Tensor]):
    """(I_SR, flow, I_GW); flow/I_GW are None for the guide-free model."""
    if not arch.use_guide:
        return gnet_forward(i_lr, None, params, arch), None, None
    if i_gi is None:
        raise ValidationError("guided model needs a guiding image")
    i_lru = bicubic_resize(i_lr, arch.hr_size, arch.hr_size)
    flow = wnet_forward(i_gi, i_lru, params, arch)
    i_gw = warp_image(i_gi, flow)
    return gnet_forward(i_lr, i_gw, params, arch), flow, i_gw


def _sample_batch(dataset, ids, rng, batch, guide_mode):
    triples = [sample_triple(dataset, ids[int(rng.integers(len(ids)))], rng,
                             guide_mode=guide_mode)
               for _ in range(batch)]
    i_lr = _stack([t.i_lr for t in triples])
    i_gt = _stack([t.i_gt for t in triples])
    i_gi = _stack([t.i_gi for t in triples]) if guide_mode != "none" else None
    i_gt_in = _stack([t.i_gt_input for t in triples])
    return i_lr, i_gi, i_gt, i_gt_in


# -- the stage loop -------------------------------------------------------------

def run_stage(bundle: ModelBundle, dataset: SynthDataset, cfg: StageConfig,
              out_dir=None) -> list[dict]:
    """Run one stage in place; returns the per-step metric records.

    With ``out_dir`` set, metrics stream to train_<stage>.jsonl and
    checkpoints are written every ``checkpoint_interval`` steps plus at the
    stage end.
    """
    cfg.validate()
    arch = bundle.arch
    if arch.hr_size != dataset.hr_size:
        raise ValidationError(
            f"model hr_size {arch.hr_size} != dataset hr_size {dataset.hr_size}")
    if cfg.stage in ("wnet-pretrain",) and not arch.use_guide:
        raise ValidationError("wnet-pretrain requires the guided architecture")
    if cfg.stage == "adversarial" and cfg.weights.lambda_id > 0 \
            and "inet-pretrain" not in bundle.meta.get("stages_done", []):
        raise ValidationError(
            "adversarial stage with identity loss needs a pretrained (frozen) "
            "Inet; run the inet-pretrain stage first")
    if cfg.eval_interval and cfg.stage in ("inet-pretrain",):
        raise ValidationError("validation-PSNR early stopping does not apply to inet-pretrain")

    bundle.meta["mean"] = {"r": float(dataset.mean[0]), "g": float(dataset.mean[1]),
                           "b": float(dataset.mean[2])}
    steps = resolve_steps(cfg, dataset)
    rng = np.random.default_rng((cfg.seed, _STAGE_CODES[cfg.stage]))
    train_ids = dataset.identities("train")
    if not train_ids:
        raise ValidationError("empty training split")

    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = (out / f"train_{cfg.stage}.jsonl").open("w")

    step_fn, finalize = _STAGE_IMPLS[cfg.stage](bundle, dataset, cfg, rng, train_ids)

    metrics: list[dict] = []
    best_val = -math.inf
    stale = 0
    steps_run = 0
    try:
        for step in range(1, steps + 1):
            records = step_fn(step)
            if isinstance(records, dict):
                records = [records]
            steps_run += 1
            last = records[-1]
            if cfg.eval_interval and step % cfg.eval_interval == 0:
                report = evaluate(bundle, dataset, split="val",
                                  mode="full" if arch.use_guide else "no-guide",
                                  seed=cfg.seed)
                last["val_psnr"] = report.mean_psnr
                if report.mean_psnr > best_val:
                    best_val = report.mean_psnr
                    stale = 0
                else:
                    stale += 1
            for record in records:
                record.update(stage=cfg.stage, step=step, lr=cfg.lr)
                _emit(metrics, logf, record)
            if out is not None and cfg.checkpoint_interval \
                    and step % cfg.checkpoint_interval == 0:
                _checkpoint(bundle, cfg, step, out, final=False)
            if cfg.eval_interval and stale >= cfg.patience:
                _emit(metrics, logf, {"stage": cfg.stage, "step": step,
                                      "event": "early-stop", "best_val_psnr": best_val})
                break
        finalize()
        for p in bundle.params.values():
            p.requires_grad = True
        bundle.meta["stage"] = cfg.stage
        bundle.meta["step"] = bundle.meta.get("step", 0) + steps_run
        done = bundle.meta.setdefault("stages_done", [])
        if cfg.stage not in done:
            done.append(cfg.stage)
        if out is not None:
            _checkpoint(bundle, cfg, steps, out, final=True)
    finally:
        if logf is not None:
            logf.close()
    return metrics


def _emit(metrics, logf, record):
    metrics.append(record)
    if logf is not None:
        logf.write(json.dumps(record, sort_keys=True) + "\n")
        logf.flush()


def _checkpoint(bundle, cfg, step, out: Path, final: bool):
    name = (f"checkpoint_{cfg.stage}_final.gwai" if final
            else f"checkpoint_{cfg.stage}_step{step:06d}.gwai")
    save_checkpoint(bundle, out / name)


# -- per-stage implementations ---------------------------------------------------

def _make_inet_stage(bundle, dataset, cfg, rng, train_ids):
    arch = bundle.arch
    bundle.freeze_all()
    bundle.set_trainable(("inet.",), True)
    b1, b2 = cfg.resolved_betas()
    opt = Adam(bundle.subset("inet."), lr=cfg.lr, beta1=b1, beta2=b2, eps=cfg.adam_eps)

    if len(train_ids) < 2:
        raise ValidationError("inet-pretrain needs >= 2 training identities")

    def sample_pair(positive: bool):
        if positive:
            k = train_ids[int(rng.integers(len(train_ids)))]
            m = len(dataset.images[k])
            j1 = int(rng.integers(m))
            j2 = (j1 + 1 + int(rng.integers(m - 1))) % m
            return (k, j1), (k, j2), 1.0
        k1 = train_ids[int(rng.integers(len(train_ids)))]
        pool = [k for k in train_ids if k != k1]
        k2 = pool[int(rng.integers(len(pool)))]
        j1 = int(rng.integers(len(dataset.images[k1])))
        j2 = int(rng.integers(len(dataset.images[k2])))
        return (k1, j1), (k2, j2), 0.0

    def step_fn(step):
        x1, x2, labels = [], [], []
        for i in range(cfg.batch_size):
            (ka, ja), (kb, jb), y = sample_pair(positive=i < cfg.batch_size // 2 + cfg.batch_size % 2)
            x1.append(preprocess_input(dataset.images[ka][ja], dataset.mean))
            x2.append(preprocess_input(dataset.images[kb][jb], dataset.mean))
            labels.append(y)
        p = siamese_predict(_stack(x1), _stack(x2), bundle.params, arch)
        y = np.array(labels, dtype=np.float32).reshape(-1, 1)
        loss = bce_loss(p, y)
        acc = float(((p.data > 0.5).astype(np.float32) == y).mean())
        backward(loss)
        opt.step()
        opt.zero_grad()
        return {"kind": "inet", "loss_bce": loss.item(), "batch_accuracy": acc}

    return step_fn, lambda: None


def _make_wnet_stage(bundle, dataset, cfg, rng, train_ids):
    arch = bundle.arch
    bundle.freeze_all()
    bundle.set_trainable(("wnet.",), True)
    b1, b2 = cfg.resolved_betas()
    opt = Adam(bundle.subset("wnet."), lr=cfg.lr, beta1=b1, beta2=b2, eps=cfg.adam_eps)

    def step_fn(step):
        i_lr, i_gi, _, i_gt_in = _sample_batch(dataset, train_ids, rng,
                                               cfg.batch_size, "normal")
        i_lru = bicubic_resize(i_lr, arch.hr_size, arch.hr_size)
        flow = wnet_forward(i_gi, i_lru, bundle.params, arch)
        i_gw = warp_image(i_gi, flow)
        loss = content_loss(i_gw, i_gt_in)
        with no_grad():
            base = content_loss(i_gi, i_gt_in).item()
        backward(loss)
        opt.step()
        opt.zero_grad()
        return {"kind": "wnet", "loss_l1_warp": loss.item(),
                "loss_l1_unwarped": base}

    return step_fn, lambda: None


def _make_content_stage(bundle, dataset, cfg, rng, train_ids):
    arch = bundle.arch
    bundle.freeze_all()
    prefixes = ("wnet.", "gnet.") if arch.use_guide else ("gnet.",)
    bundle.set_trainable(prefixes, True)
    b1, b2 = cfg.resolved_betas()
    trainable = {k: v for k, v in bundle.params.items()
                 if any(k.startswith(p) for p in prefixes)}
    opt = Adam(trainable, lr=cfg.lr, beta1=b1, beta2=b2, eps=cfg.adam_eps)
    mode = "normal" if arch.use_guide else "none"

    def step_fn(step):
        i_lr, i_gi, i_gt, _ = _sample_batch(dataset, train_ids, rng,
                                            cfg.batch_size, mode)
        i_sr, _, _ = generator_forward(bundle.params, arch, i_lr, i_gi)
        l_content = content_loss(i_sr, i_gt)
        loss = total_loss(l_content, 0.0, 0.0, cfg.weights)
        backward(loss)
        opt.step()
        opt.zero_grad()
        return {"kind": "generator", "loss_content": l_content.item(),
                "loss_total": loss.item(),
                "lambda_adv": cfg.weights.lambda_adv,
                "lambda_id": cfg.weights.lambda_id}

    return step_fn, lambda: None


def _make_adversarial_stage(bundle, dataset, cfg, rng, train_ids):
    arch = bundle.arch
    mean = dataset.mean
    gen_prefixes = ("wnet.", "gnet.") if arch.use_guide else ("gnet.",)
    bundle.freeze_all()
    b1, b2 = cfg.resolved_betas()
    gen_params = {k: v for k, v in bundle.params.items()
                  if any(k.startswith(p) for p in gen_prefixes)}
    crit_params = bundle.subset("cnet.")
    opt_g = Adam(gen_params, lr=cfg.lr, beta1=b1, beta2=b2, eps=cfg.adam_eps)
    opt_c = Adam(crit_params, lr=cfg.lr, beta1=b1, beta2=b2, eps=cfg.adam_eps)
    mode = "normal" if arch.use_guide else "none"
    use_id = cfg.weights.lambda_id > 0
    counters = {"critic_steps": 0}

    def records_of_step(step):
        recs = []
        # critic phase: fresh batches, fresh epsilon draws, generator frozen
        for p in bundle.params.values():
            p.requires_grad = False
        for p in crit_params.values():
            p.requires_grad = True
        for _ in range(cfg.n_critic):
            i_lr, i_gi, i_gt, _ = _sample_batch(dataset, train_ids, rng,
                                                cfg.batch_size, mode)
            with no_grad():
                i_sr, _, _ = generator_forward(bundle.params, arch, i_lr, i_gi)
            i_sr = i_sr.detach()
            l_fake = T.mean(cnet_forward(i_sr, bundle.params, arch))
            l_real = T.mean(cnet_forward(i_gt, bundle.params, arch))
            eps = rng.uniform(0.0, 1.0, cfg.batch_size)
            l_gp = gradient_penalty(i_sr, i_gt, bundle.params, arch, eps)
            loss_c = critic_loss(l_fake, l_real, l_gp, cfg.weights.lambda_gp)
            backward(loss_c)
            opt_c.step()
            opt_c.zero_grad()
            counters["critic_steps"] += 1
            recs.append({"kind": "critic", "critic_step": counters["critic_steps"],
                         "loss_fake": l_fake.item(), "loss_real": l_real.item(),
                         "loss_gp": l_gp.item(), "loss_critic": loss_c.item(),
                         "wasserstein": l_real.item() - l_fake.item(),
                         "lambda_gp": cfg.weights.lambda_gp})
        # generator phase: gradients through Gnet AND Wnet jointly
        for p in crit_params.values():
            p.requires_grad = False
        for p in gen_params.values():
            p.requires_grad = True
        i_lr, i_gi, i_gt, _ = _sample_batch(dataset, train_ids, rng,
                                            cfg.batch_size, mode)
        i_sr, _, _ = generator_forward(bundle.params, arch, i_lr, i_gi)
        l_content = content_loss(i_sr, i_gt)
        l_adv = adversarial_loss(cnet_forward(i_sr, bundle.params, arch))
        if use_id:
            e_sr = inet_embed(_gt_to_input_space(i_sr, mean), bundle.params, arch)
            with no_grad():
                e_gt = inet_embed(_gt_to_input_space(i_gt, mean), bundle.params, arch)
            l_id = identity_loss(e_sr, e_gt.detach())
        else:
            l_id = Tensor(np.float32(0.0))
        loss_g = total_loss(l_content, l_adv, l_id, cfg.weights)
        backward(loss_g)
        opt_g.step()
        opt_g.zero_grad()
        recs.append({"kind": "generator", "loss_content": l_content.item(),
                     "loss_adv": l_adv.item(), "loss_id": l_id.item(),
                     "loss_total": loss_g.item(),
                     "lambda_adv": cfg.weights.lambda_adv,
                     "lambda_id": cfg.weights.lambda_id})
        return recs

    # one schedule step = n_critic critic updates + one generator update
    return records_of_step, lambda: None


_STAGE_IMPLS = {
    "inet-pretrain": _make_inet_stage,
    "wnet-pretrain": _make_wnet_stage,
    "content": _make_content_stage,
    "adversarial": _make_adversarial_stage,
}


# -- inference and evaluation ----------------------------------------------------

def _bundle_mean(bundle: ModelBundle) -> np.ndarray:
    meta = bundle.meta.get("mean")
    if meta is None:
        raise ValidationError(
            "model has no stored preprocessing mean; train it (or set meta['mean'])")
    return np.array([meta["r"], meta["g"], meta["b"]], dtype=np.float32)


def infer(bundle: ModelBundle, lr01: np.ndarray,
          guide01: Optional[np.ndarray] = None, mode: str = "full") -> np.ndarray:
    """Super-resolve one LR image ([0,1], CHW); returns I_SR in [0,1]."""
    arch = bundle.arch
    lr_side = arch.lr_size
    lr01 = np.asarray(lr01, dtype=np.float32)
    if lr01.shape != (3, lr_side, lr_side):
        raise ValidationError(
            f"LR input must be (3, {lr_side}, {lr_side}) for this model, got {lr01.shape}")
    if mode not in ("full", "no-guide"):
        raise ValidationError(f"unknown inference mode {mode!r}")
    if mode == "full" and not arch.use_guide:
        raise ValidationError("model was trained without a guide branch; use mode=no-guide")
    if mode == "no-guide" and arch.use_guide:
        raise ValidationError("guided model requires a guiding image (mode=full)")
    mean = _bundle_mean(bundle)
    with no_grad():
        i_lr = Tensor(preprocess_input(lr01, mean)[None])
        i_gi = None
        if mode == "full":
            if guide01 is None:
                raise ValidationError("missing guiding image for a guided model")
            guide01 = np.asarray(guide01, dtype=np.float32)
            if guide01.shape != (3, arch.hr_size, arch.hr_size):
                raise ValidationError(
                    f"guide must be (3, {arch.hr_size}, {arch.hr_size}), got {guide01.shape}")
            i_gi = Tensor(preprocess_input(guide01, mean)[None])
        i_sr, _, _ = generator_forward(bundle.params, arch, i_lr, i_gi)
    return depreprocess_gt(i_sr.data[0])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0,1]; +inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class EvalReport:
    mode: str
    model_id: str
    dataset_id: str
    entries: list
    mean_psnr: float

    def to_json_dict(self) -> dict:
        def enc(v):
            return "inf" if math.isinf(v) else v
        return {"mode": self.mode, "model_id": self.model_id,
                "dataset_id": self.dataset_id,
                "entries": [dict(e, psnr=enc(e["psnr"])) for e in self.entries],
                "mean_psnr": enc(self.mean_psnr)}


def model_digest(bundle: ModelBundle) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(bundle.arch.to_json_dict(), sort_keys=True).encode())
    for name in sorted(bundle.params):
        h.update(bundle.params[name].data.tobytes())
    return h.hexdigest()[:16]


def dataset_digest(dataset: SynthDataset) -> str:
    return hashlib.sha256(
        json.dumps(dataset.manifest, sort_keys=True).encode()).hexdigest()[:16]


def evaluate(bundle: ModelBundle, dataset: SynthDataset, split: str = "test",
             mode: str = "full", seed: int = 0,
             guide_chooser: Optional[Callable] = None,
             infer_fn: Optional[Callable] = None) -> EvalReport:
    """Mean PSNR (8-bit quantized, [0,1] scale) over a split.

    ``guide_chooser(identity, image_index, rng) -> (gid, gidx) | None`` can
    pin guides (used to show full vs shuffled-guide coherence);
    ``infer_fn(lr01, guide01)`` substitutes the model entirely (tests).
    """
    if mode not in ("full", "no-guide", "shuffled-guide"):
        raise ValidationError(f"unknown eval mode {mode!r}")
    ids = dataset.identities(split)
    if not ids:
        raise ValidationError(f"split {split!r} is empty")
    if mode != "no-guide" and not bundle.arch.use_guide and infer_fn is None:
        raise ValidationError("guide-free model can only be evaluated with mode=no-guide")
    rng = np.random.default_rng((seed, _EVAL_STREAM))
    hr = dataset.hr_size
    entries = []
    for k in sorted(ids):
        imgs = dataset.images[k]
        for j, gt01 in enumerate(imgs):
            guide01 = None
            if mode != "no-guide":
                pick = guide_chooser(k, j, rng) if guide_chooser is not None else None
                if pick is None:
                    if mode == "full":
                        remaining = [jj for jj in range(len(imgs)) if jj != j]
                        if not remaining:
                            raise ValidationError(
                                f"identity {k} has a single image; cannot guide")
                        pick = (k, remaining[int(rng.integers(len(remaining)))])
                    else:
                        others = [kk for kk in ids if kk != k]
                        if not others:
                            raise ValidationError("shuffled-guide eval needs >= 2 identities")
                        gid = others[int(rng.integers(len(others)))]
                        pick = (gid, int(rng.integers(len(dataset.images[gid]))))
                guide01 = dataset.images[pick[0]][pick[1]]
            lr01 = bicubic_resize(gt01, hr // 8, hr // 8)
            if infer_fn is not None:
                sr01 = infer_fn(lr01, guide01)
            else:
                sr01 = infer(bundle, lr01, guide01,
                             mode="full" if mode != "no-guide" else "no-guide")
            val = psnr(to_uint8(sr01) / 255.0, to_uint8(gt01) / 255.0)
            entries.append({"identity": k, "image": j,
                            "path": str(dataset.paths[k][j]), "psnr": val})
    mean_psnr = float(np.mean([e["psnr"] for e in entries]))
    return EvalReport(mode=mode,
                      model_id=model_digest(bundle) if infer_fn is None else "stub",
                      dataset_id=dataset_digest(dataset),
                      entries=entries, mean_psnr=mean_psnr)
