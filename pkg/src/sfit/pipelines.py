"""Training stages: source training, target adaptation, generator init,
source-free image translation and fine-tuning.

Each stage takes a :class:`RunConfig`, the models and data it declares, and
returns a new model; inputs are never mutated. Every optimizer is Adam with a
per-step cosine decay from ``cfg.base_lr`` to zero.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .config import RunConfig
from .data import ImageSet, batches, epoch_plan, split
from .errors import FrozenModelViolation, HeadMismatch, SfitError, UnlabeledData
from .models import Classifier, Generator, build_classifier, build_generator, head_hash, state_hash

logger = logging.getLogger(__name__)


class TrainLog:
    """Per-step loss records plus per-epoch metrics for one stage."""

    def __init__(self, stage: str, seed: int):
        self.stage = stage
        self.seed = seed
        self.records: list[tuple[int, str, float]] = []
        self.epochs: list[dict] = []
        self.started = time.time()
        self.finished = None

    def step(self, step: int, **terms):
        if self.records and step < self.records[-1][0]:
            raise SfitError(f"step index went backwards: {step} after {self.records[-1][0]}")
        for name, value in terms.items():
            value = float(value)
            if not math.isfinite(value):
                raise SfitError(f"{self.stage}: non-finite {name} = {value} at step {step}")
            self.records.append((step, name, value))

    def epoch(self, epoch: int, **metrics):
        entry = {"epoch": epoch, **{k: float(v) for k, v in metrics.items()}, "time": time.time()}
        self.epochs.append(entry)
        shown = ", ".join(f"{k}={v:.4f}" for k, v in metrics.items())
        logger.info("%s epoch %d: %s", self.stage, epoch, shown)

    def series(self, name: str) -> np.ndarray:
        return np.array([v for _, n, v in self.records if n == name])

    def summary(self) -> dict:
        final = {}
        for _, name, value in self.records:
            final[name] = value
        return {
            "stage": self.stage,
            "seed": self.seed,
            "steps": (self.records[-1][0] + 1) if self.records else 0,
            "final_terms": final,
            "epochs": self.epochs,
            "started": self.started,
            "finished": self.finished or time.time(),
        }

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{self.stage}.log.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "term_name", "value"])
            writer.writerows((s, n, repr(v)) for s, n, v in self.records)
        (out / f"{self.stage}.summary.json").write_text(json.dumps(self.summary(), indent=2) + "\n")


def _setup(cfg: RunConfig):
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)


def _optimizer(params, cfg: RunConfig, total_steps: int):
    opt = torch.optim.Adam(params, lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda t: 0.5 * (1.0 + math.cos(math.pi * min(t, total_steps) / max(total_steps, 1)))
    )
    return opt, sched


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _epoch_batches(data: ImageSet, cfg: RunConfig, epoch: int):
    for b in batches(data, epoch_plan(min(cfg.batch_size, len(data)), cfg.seed, epoch)):
        labels = None if b.labels is None else torch.from_numpy(np.array(b.labels))
        yield torch.from_numpy(np.array(b.images)), labels


def _freeze(model):
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _freeze_head(model: Classifier):
    for p in model.head.parameters():
        p.requires_grad_(False)


def _check_compatible(model: Classifier, data: ImageSet):
    if data.channels != model.in_channels or data.image_size != (model.image_size, model.image_size):
        raise HeadMismatch(
            f"model expects {model.in_channels}x{model.image_size}x{model.image_size} images, "
            f"data has {data.channels}x{data.image_size[0]}x{data.image_size[1]}"
        )


@torch.no_grad()
def predict(model: Classifier, data: ImageSet, generator: Generator | None = None, batch_size: int = 256):
    """Eval-mode class probabilities for every image (optionally translated first)."""
    model.eval()
    if generator is not None:
        generator.eval()
    out = []
    for i in range(0, len(data), batch_size):
        x = torch.from_numpy(np.array(data.images[i:i + batch_size]))
        if generator is not None:
            x = generator(x)
        out.append(model(x).probs)
    return torch.cat(out).numpy()


def accuracy(model: Classifier, data: ImageSet, generator: Generator | None = None) -> float:
    if data.labels is None:
        raise UnlabeledData("accuracy needs a labeled set")
    return float((predict(model, data, generator).argmax(1) == data.labels).mean())


# ---------------------------------------------------------------- stages

def train_source(cfg: RunConfig, source_data: ImageSet, log: TrainLog | None = None) -> Classifier:
    """Supervised cross-entropy training of a fresh classifier."""
    if source_data.labels is None:
        raise UnlabeledData("train_source needs labeled source data")
    _setup(cfg)
    num_classes = int(source_data.labels.max()) + 1
    model = build_classifier(source_data.channels, max(num_classes, 10), source_data.image_size[0], cfg.seed)
    log = log or TrainLog("train_source", cfg.seed)
    total = cfg.epochs * _steps_per_epoch(len(source_data), cfg.batch_size)
    opt, sched = _optimizer(model.parameters(), cfg, total)
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        for x, y in _epoch_batches(source_data, cfg, epoch):
            loss = F.cross_entropy(model(x).logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            log.step(step, ce=loss.item())
            step += 1
        log.epoch(epoch, train_acc=accuracy(model, source_data))
    log.finished = time.time()
    return model


def adapt_target_im(cfg: RunConfig, source_model: Classifier, target_data: ImageSet,
                    log: TrainLog | None = None) -> Classifier:
    """Source-free adaptation by information maximization, head frozen.

    Minimizes mean per-sample entropy plus the diversity term (negative
    entropy of the mean prediction) with equal weights.
    """
    target_data = target_data.unlabeled()
    _check_compatible(source_model, target_data)
    _setup(cfg)
    model = copy.deepcopy(source_model)
    _freeze_head(model)
    before = head_hash(model)
    log = log or TrainLog("adapt_target", cfg.seed)
    total = cfg.epochs * _steps_per_epoch(len(target_data), cfg.batch_size)
    opt, sched = _optimizer(model.features.parameters(), cfg, total)
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        for x, _ in _epoch_batches(target_data, cfg, epoch):
            probs = model(x).probs
            ent = L.entropy_loss(probs)
            div = L.diversity_loss(probs)
            loss = ent + div
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            log.step(step, entropy=ent.item(), diversity=div.item())
            step += 1
        log.epoch(epoch, entropy=log.series("entropy")[-1], diversity=log.series("diversity")[-1])
    if head_hash(model) != before:
        raise FrozenModelViolation("classifier head changed during adaptation")
    log.finished = time.time()
    return model


def adapt_target_mmd(cfg: RunConfig, source_model: Classifier, source_data: ImageSet, target_data: ImageSet,
                     log: TrainLog | None = None) -> Classifier:
    """DAN-style adaptation: source cross entropy + polynomial-kernel MMD on pooled features.

    Needs the labeled source data, so this baseline is not source-free.
    """
    if source_data.labels is None:
        raise UnlabeledData("adapt_target_mmd needs labeled source data")
    target_data = target_data.unlabeled()
    _check_compatible(source_model, source_data)
    _check_compatible(source_model, target_data)
    _setup(cfg)
    model = copy.deepcopy(source_model)
    _freeze_head(model)
    before = head_hash(model)
    log = log or TrainLog("adapt_target", cfg.seed)
    total = cfg.epochs * _steps_per_epoch(len(target_data), cfg.batch_size)
    opt, sched = _optimizer(model.features.parameters(), cfg, total)
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        src_iter = _epoch_batches(source_data, cfg, epoch)
        for x_t, _ in _epoch_batches(target_data, cfg, epoch):
            try:
                x_s, y_s = next(src_iter)
            except StopIteration:
                src_iter = _epoch_batches(source_data, cfg, epoch + 1_000_000)
                x_s, y_s = next(src_iter)
            out = model(torch.cat([x_s, x_t]))
            n = len(x_s)
            ce = F.cross_entropy(out.logits[:n], y_s)
            mmd = L.mmd_poly2(out.pooled[:n], out.pooled[n:]) if cfg.mmd_weight else torch.zeros(())
            loss = ce + cfg.mmd_weight * mmd if cfg.mmd_weight else ce
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            log.step(step, ce=ce.item(), mmd=mmd.item())
            step += 1
        log.epoch(epoch, source_acc=accuracy(model, source_data))
    if head_hash(model) != before:
        raise FrozenModelViolation("classifier head changed during adaptation")
    log.finished = time.time()
    return model


def init_generator(cfg: RunConfig, source_model: Classifier, target_data: ImageSet,
                   log: TrainLog | None = None) -> Generator:
    """Train a fresh generator to reproduce its input (L1 pixels + L2 source features)."""
    target_data = target_data.unlabeled()
    _check_compatible(source_model, target_data)
    _setup(cfg)
    source_model = _freeze(copy.deepcopy(source_model))
    gen = build_generator(target_data.channels, cfg.seed)
    n_hold = max(1, min(256, len(target_data) // 10))
    if len(target_data) - n_hold >= cfg.batch_size:
        train, held = split(target_data, 1 - n_hold / len(target_data), cfg.seed)
    else:
        train, held = target_data, target_data
    log = log or TrainLog("init_generator", cfg.seed)
    total = cfg.epochs * _steps_per_epoch(len(train), cfg.batch_size)
    opt, sched = _optimizer(gen.parameters(), cfg, total)
    step = 0
    for epoch in range(cfg.epochs):
        gen.train()
        for x, _ in _epoch_batches(train, cfg, epoch):
            x_gen = gen(x)
            with torch.no_grad():
                feat = source_model(x).pooled
            l_id = L.id_loss(x_gen, x)
            l_content = L.content_loss(source_model(x_gen).pooled, feat)
            loss = l_id + l_content
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            log.step(step, id=l_id.item(), content=l_content.item())
            step += 1
        log.epoch(epoch, heldout_id=heldout_id_loss(gen, held))
    final = heldout_id_loss(gen, held)
    if cfg.epochs and final >= 0.05:
        logger.warning("transparent-filter init reached mean |x_gen - x| = %.4f (>= 0.05)", final)
    log.finished = time.time()
    return gen


@torch.no_grad()
def heldout_id_loss(gen: Generator, data: ImageSet) -> float:
    gen.eval()
    x = torch.from_numpy(np.array(data.images[:256]))
    return float(L.id_loss(gen(x), x))


def train_sfit(cfg: RunConfig, source_model: Classifier, target_model: Classifier, generator: Generator,
               target_data: ImageSet, log: TrainLog | None = None) -> Generator:
    """Source-free image translation: fit the generator so the
    generated-image/source-model branch matches the target-image/target-model
    branch under the configured loss weights. Both classifiers stay frozen.
    """
    target_data = target_data.unlabeled()
    _check_compatible(source_model, target_data)
    _check_compatible(target_model, target_data)
    if head_hash(source_model) != head_hash(target_model):
        raise HeadMismatch("source and target models must share the classifier head")
    _setup(cfg)
    weights = cfg.weights
    source_model = _freeze(copy.deepcopy(source_model))
    target_model = _freeze(copy.deepcopy(target_model))
    gen = copy.deepcopy(generator)
    hashes = state_hash(source_model), state_hash(target_model)
    recorder = L.BNStatsRecorder(source_model)
    log = log or TrainLog("train_sfit", cfg.seed)
    total = cfg.epochs * _steps_per_epoch(len(target_data), cfg.batch_size)
    opt, sched = _optimizer(gen.parameters(), cfg, total)
    T = cfg.kd_temperature
    step = 0
    for epoch in range(cfg.epochs):
        gen.train()
        for x, _ in _epoch_batches(target_data, cfg, epoch):
            with torch.no_grad():
                out_t = target_model(x)
            x_gen = gen(x)
            with recorder:
                out_s = source_model(x_gen)
            if T == 1:
                p_t, p_s = out_t.probs, out_s.probs
            else:
                p_t, p_s = F.softmax(out_t.logits / T, 1), F.softmax(out_s.logits / T, 1)
            terms = {
                "kd": L.kd_loss(p_t, p_s),
                "rp": L.rp_loss(out_t.feature_map, out_s.feature_map),
            }
            if weights.w_style:
                terms["style"] = L.style_loss(out_t.feature_map, out_s.feature_map)
            if weights.w_batch:
                terms["batch"] = L.batch_similarity_loss(out_t.pooled, out_s.pooled)
            if weights.w_pixel:
                terms["pixel"] = L.pixel_similarity_loss(out_t.feature_map, out_s.feature_map)
            if weights.w_bn:
                terms["bn"] = L.bn_stats_loss(recorder.batch_stats, recorder.running_stats)
            loss = L.total_sfit_loss(weights, terms)
            if loss.requires_grad:
                opt.zero_grad()
                loss.backward()
                opt.step()
            sched.step()
            log.step(step, total=loss.item(), **{k: v.item() for k, v in terms.items()})
            step += 1
        if (state_hash(source_model), state_hash(target_model)) != hashes:
            raise FrozenModelViolation(f"a classifier changed during SFIT epoch {epoch}")
        log.epoch(epoch, **{k: float(log.series(k)[-1]) for k in terms})
    log.finished = time.time()
    return gen


def finetune_target(cfg: RunConfig, source_model: Classifier, target_model: Classifier, generator: Generator,
                    target_data: ImageSet, log: TrainLog | None = None) -> Classifier:
    """Fine-tune the target feature extractor with diversity + agreement-gated
    pseudo-label losses; pseudo labels come from the generated-image/source-model
    branch and the target model itself. BN statistics update (train mode).
    """
    target_data = target_data.unlabeled()
    _check_compatible(target_model, target_data)
    _setup(cfg)
    source_model = _freeze(copy.deepcopy(source_model))
    gen = _freeze(copy.deepcopy(generator))
    hashes = state_hash(source_model), state_hash(gen)
    model = copy.deepcopy(target_model)
    _freeze_head(model)
    before = head_hash(model)
    log = log or TrainLog("finetune", cfg.seed)
    total = cfg.epochs * _steps_per_epoch(len(target_data), cfg.batch_size)
    opt, sched = _optimizer(model.features.parameters(), cfg, total)
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        agreed = seen = 0
        for x, _ in _epoch_batches(target_data, cfg, epoch):
            with torch.no_grad():
                y_s = source_model(gen(x)).probs.argmax(1)
            probs = model(x).probs
            y_t = probs.detach().argmax(1)
            l_div = L.diversity_loss(probs)
            l_pseudo = L.pseudo_label_loss(probs, y_s, y_t)
            loss = l_div + l_pseudo
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            n_agree = int((y_s == y_t).sum())
            agreed += n_agree
            seen += len(x)
            log.step(step, diversity=l_div.item(), pseudo=l_pseudo.item(), agreement=n_agree / len(x))
            step += 1
        if (state_hash(source_model), state_hash(gen)) != hashes:
            raise FrozenModelViolation(f"source model or generator changed during fine-tuning epoch {epoch}")
        log.epoch(epoch, agreement_rate=agreed / max(seen, 1))
    if head_hash(model) != before:
        raise FrozenModelViolation("classifier head changed during fine-tuning")
    log.finished = time.time()
    return model
