"""The four training stages, the SSGAN ablation baseline and run orchestration.

Every stage function takes in-memory tensors/modules and a ``MetricsLog`` and
returns in-memory results; ``run_stages`` adds the on-disk run directory,
checkpoint lifecycle and prerequisite checks on top.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses
from .checkpoint import Checkpoint, LifecycleError, load_checkpoint, save_checkpoint
from .config import NetConfig, RunConfig
from .data import DataBundle, ImageSet, augment_batch, load_manifest, make_contrastive_batch
from .metrics import MetricsLog, fid, gaussian_stats, top1_accuracy, z_std
from .nets import Decoder, Discriminator, Encoder, Generator, ProjectionHead, build_stage1, freeze

log = logging.getLogger(__name__)

_STREAMS = {"init": 0, "batch": 1, "augment": 2, "noise": 3, "mixup": 4, "fid": 5, "pool": 6}


class MissingPrerequisite(RuntimeError):
    """A stage was asked to run without the checkpoints it depends on."""


def single_worker() -> None:
    """Pin torch to one thread and deterministic kernels."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def np_stream(seed: int, stage: int | str, name: str) -> np.random.Generator:
    key = stage if isinstance(stage, int) else sum(map(ord, stage))
    return np.random.default_rng([seed, key, _STREAMS[name]])


def torch_stream(seed: int, stage: int | str, name: str) -> torch.Generator:
    s = int(np_stream(seed, stage, name).integers(0, 2**62))
    return torch.Generator().manual_seed(s)


def seed_init(seed: int, stage: int | str) -> None:
    torch.manual_seed(int(np_stream(seed, stage, "init").integers(0, 2**62)))


def _batches(n: int, size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start : start + size]


class _Cycler:
    """Endless shuffled minibatches over ``n`` items."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n) if n else np.zeros(0, dtype=np.int64)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k and self.n:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            step = min(k - len(out), self.n - self.pos)
            out.extend(self.order[self.pos : self.pos + step].tolist())
            self.pos += step
        return np.asarray(out, dtype=np.int64)


def _adam(params, cfg: RunConfig, stage: int):
    return torch.optim.Adam(params, lr=cfg.stages.lr(stage), betas=tuple(cfg.stages.betas))


def _params_snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def params_equal(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


@torch.no_grad()
def evaluate(disc: nn.Module, images: ImageSet, batch_size: int = 256) -> float:
    """Held-out top-1 of the class head."""
    if len(images) == 0:
        return float("nan")
    was_training = disc.training
    disc.eval()
    logits = torch.cat([disc(images.images[i : i + batch_size])[0] for i in range(0, len(images), batch_size)])
    disc.train(was_training)
    return top1_accuracy(logits, images.labels)


@torch.no_grad()
def sample_fakes(gen: Generator, n: int, noise: torch.Generator) -> torch.Tensor:
    z = torch.randn(n, gen.noise_dim, generator=noise)
    return gen(z)


# ---------------------------------------------------------------------------
# stage 1: contrastive pretraining with the reconstruction decoder
# ---------------------------------------------------------------------------


@dataclass
class Stage1Result:
    encoder: Encoder
    projector: ProjectionHead
    decoder: Decoder
    losses: list[float] = field(default_factory=list)
    z_std: list[float] = field(default_factory=list)


def run_stage1_pretrain(images: torch.Tensor, cfg: RunConfig, mlog: MetricsLog,
                        epochs: Optional[int] = None) -> Stage1Result:
    """Train encoder + projection head (+ decoder) on unlabeled images."""
    if len(images) == 0:
        raise ValueError("stage 1 needs at least one image")
    sc, seed = cfg.stages, cfg.stages.seed
    epochs = sc.stage1_epochs if epochs is None else epochs
    seed_init(seed, 1)
    enc, proj, dec = build_stage1(cfg.nets)
    params = list(enc.parameters()) + list(proj.parameters())
    if sc.use_decoder:
        params += list(dec.parameters())
    opt = _adam(params, cfg, 1)
    batch_rng, aug_rng = np_stream(seed, 1, "batch"), np_stream(seed, 1, "augment")
    monitor = images[np_stream(seed, 1, "pool").permutation(len(images))[:256]]
    result = Stage1Result(enc, proj, dec)
    for epoch in range(1, epochs + 1):
        enc.train(), proj.train(), dec.train()
        tot = con_sum = rec_sum = 0.0
        nb = 0
        for idx in _batches(len(images), sc.batch_size, batch_rng):
            views = make_contrastive_batch(images[idx], cfg.augment, aug_rng)
            h = enc(views)
            z = proj(h)
            if sc.use_decoder:
                x = views[0::2]
                total, con, rec = losses.pretrain_loss(z, x, dec(h[0::2]), cfg.contrastive.temperature)
                rec_sum += rec.item()
            else:
                total = con = losses.contrastive_loss(z, cfg.contrastive.temperature)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            tot += total.item()
            con_sum += con.item()
            nb += 1
        enc.eval(), proj.eval()
        with torch.no_grad():
            zs = z_std(proj(enc(monitor))) if len(monitor) >= 2 else float("nan")
        mlog.log(1, epoch, "loss", tot / nb)
        mlog.log(1, epoch, "contrastive_loss", con_sum / nb)
        if sc.use_decoder:
            mlog.log(1, epoch, "reconstruction_loss", rec_sum / nb)
        mlog.log(1, epoch, "z_std", zs)
        result.losses.append(tot / nb)
        result.z_std.append(zs)
    enc.eval(), proj.eval(), dec.eval()
    return result


# ---------------------------------------------------------------------------
# stage 2: least-squares GAN with FID-based generator selection
# ---------------------------------------------------------------------------


@dataclass
class Stage2Result:
    generator: Generator  # G_best, frozen
    discriminator: Discriminator  # snapshot taken at G_best's epoch
    best_epoch: int
    best_fid: float
    fid_series: list[tuple[int, float]] = field(default_factory=list)
    accepted: list[tuple[int, float]] = field(default_factory=list)


class FidScorer:
    """FID of generator samples against a fixed real sample, on frozen encoder features."""

    def __init__(self, extractor: nn.Module, real: torch.Tensor, n_samples: int, noise_dim: int,
                 noise: torch.Generator, batch_size: int = 256):
        self.extractor = freeze(extractor)
        self.batch_size = batch_size
        self.real_stats = gaussian_stats(self._features(real))
        self.z = torch.randn(n_samples, noise_dim, generator=noise)

    @torch.no_grad()
    def _features(self, x):
        return torch.cat([self.extractor(x[i : i + self.batch_size]) for i in range(0, len(x), self.batch_size)])

    @torch.no_grad()
    def __call__(self, gen: Generator) -> float:
        was_training = gen.training
        gen.eval()
        fake = torch.cat([gen(self.z[i : i + self.batch_size]) for i in range(0, len(self.z), self.batch_size)])
        gen.train(was_training)
        return fid(self.real_stats, gaussian_stats(self._features(fake)))


def _fid_real_sample(real: torch.Tensor, n: int, rng: np.random.Generator) -> torch.Tensor:
    return real[rng.permutation(len(real))[: min(n, len(real))]]


def run_stage2_gan(real: torch.Tensor, encoder: Optional[Encoder], cfg: RunConfig, mlog: MetricsLog,
                   epochs: Optional[int] = None, stage_tag: int | str = 2) -> Stage2Result:
    """Alternate D/G least-squares updates; keep the minimum-FID generator."""
    if encoder is None:
        raise MissingPrerequisite("stage 2 needs the stage-1 encoder as FID feature extractor")
    if len(real) < 2:
        raise ValueError("stage 2 needs at least two real images")
    sc, seed = cfg.stages, cfg.stages.seed
    epochs = sc.stage2_epochs if epochs is None else epochs
    seed_init(seed, stage_tag)
    gen, disc = Generator(cfg.nets), Discriminator(cfg.nets)
    opt_g = _adam(gen.parameters(), cfg, 2)
    opt_d = _adam(disc.parameters(), cfg, 2)
    batch_rng = np_stream(seed, stage_tag, "batch")
    noise = torch_stream(seed, stage_tag, "noise")
    scorer = FidScorer(encoder, _fid_real_sample(real, sc.fid_sample_size, np_stream(seed, stage_tag, "fid")),
                       sc.fid_sample_size, cfg.nets.noise_dim, torch_stream(seed, stage_tag, "fid"))

    def consider(epoch):
        score = scorer(gen)
        mlog.log(stage_tag, epoch, "fid", score)
        res.fid_series.append((epoch, score))
        if score < res.best_fid:
            res.best_fid, res.best_epoch = score, epoch
            best["g"], best["d"] = _params_snapshot(gen), _params_snapshot(disc)
            res.accepted.append((epoch, score))
            mlog.log(stage_tag, epoch, "fid_accepted", score)

    res = Stage2Result(gen, disc, 0, math.inf)
    best: dict = {}
    consider(0)
    t = cfg.gan
    for epoch in range(1, epochs + 1):
        gen.train(), disc.train()
        ld_sum = lg_sum = 0.0
        nb = 0
        for idx in _batches(len(real), sc.batch_size, batch_rng):
            x = real[idx]
            fake = gen(torch.randn(len(idx), cfg.nets.noise_dim, generator=noise))
            _, d_out = disc(torch.cat([x, fake.detach()]))
            loss_d, _ = losses.lsgan_losses(d_out[: len(idx)], d_out[len(idx) :], t)
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()
            _, d_fake = disc(fake)
            loss_g = losses.lsgan_generator_loss(d_fake, t)
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()
            ld_sum += loss_d.item()
            lg_sum += loss_g.item()
            nb += 1
        mlog.log(stage_tag, epoch, "loss_d", ld_sum / nb)
        mlog.log(stage_tag, epoch, "loss_g", lg_sum / nb)
        if epoch % sc.fid_eval_interval == 0 or epoch == epochs:
            consider(epoch)
    gen.load_state_dict(best["g"])
    disc.load_state_dict(best["d"])
    freeze(gen)
    disc.train()
    return res


# ---------------------------------------------------------------------------
# stage 3: fine-tune the classifier against the frozen generator
# ---------------------------------------------------------------------------


@dataclass
class ClassifierResult:
    discriminator: Discriminator
    accuracy: list[tuple[int, float]] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.accuracy[-1][1] if self.accuracy else float("nan")


def _log_eval(mlog, stage, epoch, epochs, disc, heldout, every, result):
    if len(heldout) and (epoch % every == 0 or epoch == epochs):
        acc = evaluate(disc, heldout)
        mlog.log(stage, epoch, "top1", acc)
        result.accuracy.append((epoch, acc))


def run_stage3_finetune(data: DataBundle, g_best: Generator, disc: Discriminator, cfg: RunConfig,
                        mlog: MetricsLog, epochs: Optional[int] = None) -> ClassifierResult:
    """Cross-entropy on labeled reals + least-squares realness on reals vs G_best fakes."""
    if len(data.labeled) == 0:
        raise ValueError("stage 3 needs labeled images")
    sc, seed = cfg.stages, cfg.stages.seed
    epochs = sc.stage3_epochs if epochs is None else epochs
    freeze(g_best)
    disc.train()
    opt = _adam(disc.parameters(), cfg, 3)
    batch_rng, aug_rng = np_stream(seed, 3, "batch"), np_stream(seed, 3, "augment")
    noise = torch_stream(seed, 3, "noise")
    reals = ImageSet.concat(data.labeled, data.unlabeled).images
    pool = _Cycler(len(reals), np_stream(seed, 3, "pool"))
    result = ClassifierResult(disc)
    for epoch in range(1, epochs + 1):
        ls_sum = lu_sum = 0.0
        nb = 0
        for idx in _batches(len(data.labeled), sc.batch_size, batch_rng):
            x_l = augment_batch(data.labeled.images[idx], cfg.augment, aug_rng)
            y = data.labeled.labels[idx]
            x_r = reals[pool.take(len(idx))]
            fake = sample_fakes(g_best, sc.n_fakes, noise) if sc.n_fakes else x_r[:0]
            logits, d2 = disc(torch.cat([x_l, x_r, fake]))
            nl, nr = len(idx), len(x_r)
            sup, unsup = losses.stage3_losses(logits[:nl], y, d2[nl : nl + nr], d2[nl + nr :], cfg.gan)
            loss = sup + unsup
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            ls_sum += sup.item()
            lu_sum += unsup.item()
            nb += 1
        mlog.log(3, epoch, "loss_supervised", ls_sum / nb)
        mlog.log(3, epoch, "loss_unsupervised", lu_sum / nb)
        _log_eval(mlog, 3, epoch, epochs, disc, data.heldout, sc.eval_interval, result)
    return result


# ---------------------------------------------------------------------------
# stage 4: MixMatch pseudo-labeling over real and generated images
# ---------------------------------------------------------------------------


def guess_labels(disc: nn.Module, views: Sequence[torch.Tensor], temperature: float) -> torch.Tensor:
    """Average the class distributions over augmented views, then sharpen."""
    with torch.no_grad():
        probs = torch.stack([torch.softmax(disc(v)[0], dim=1) for v in views]).mean(dim=0)
    return losses.sharpen(probs, temperature)


def run_stage4_mixmatch(data: DataBundle, g_best: Generator, disc: Discriminator, cfg: RunConfig,
                        mlog: MetricsLog, epochs: Optional[int] = None) -> ClassifierResult:
    if len(data.labeled) == 0:
        raise ValueError("stage 4 needs labeled images")
    sc, mm, seed = cfg.stages, cfg.mixmatch, cfg.stages.seed
    epochs = sc.stage4_epochs if epochs is None else epochs
    freeze(g_best)
    disc.train()
    opt = _adam(disc.parameters(), cfg, 4)
    batch_rng, aug_rng = np_stream(seed, 4, "batch"), np_stream(seed, 4, "augment")
    mix_rng = np_stream(seed, 4, "mixup")
    noise = torch_stream(seed, 4, "noise")
    use_real_u = sc.pseudo_label_unlabeled and len(data.unlabeled) > 0
    upool = _Cycler(len(data.unlabeled) if use_real_u else 0, np_stream(seed, 4, "pool"))
    n = data.n_classes
    steps_per_epoch = math.ceil(len(data.labeled) / sc.batch_size)
    total_steps = epochs * steps_per_epoch
    step = 0
    result = ClassifierResult(disc)
    for epoch in range(1, epochs + 1):
        sums = {"loss": 0.0, "loss_x": 0.0, "loss_u": 0.0}
        sum_err = 0.0
        nb = 0
        for idx in _batches(len(data.labeled), sc.batch_size, batch_rng):
            x_l = augment_batch(data.labeled.images[idx], cfg.augment, aug_rng)
            p_l = F.one_hot(data.labeled.labels[idx], n).float()
            parts = []
            if use_real_u:
                parts.append(data.unlabeled.images[upool.take(sc.batch_size)])
            if sc.n_fakes:
                parts.append(sample_fakes(g_best, sc.n_fakes, noise))
            inputs, targets = [x_l], [p_l]
            if parts:
                u = torch.cat(parts)
                views = [augment_batch(u, cfg.augment, aug_rng) for _ in range(mm.k_augment)]
                q = guess_labels(disc, views, mm.sharpen_T)
                sum_err = max(sum_err, float((q.sum(dim=1) - 1).abs().max()))
                inputs += views
                targets += [q] * mm.k_augment
            all_x, all_p = torch.cat(inputs), torch.cat(targets)
            perm = torch.from_numpy(mix_rng.permutation(len(all_x)))
            lam = losses.mixup_coefficient(mm.mixup_alpha, mix_rng)
            mixed_x, mixed_p, _ = losses.mixup(all_x, all_x[perm], all_p, all_p[perm], mm.mixup_alpha, lam=lam)
            logits = disc(mixed_x)[0]
            nl = len(idx)
            step += 1
            weight = losses.rampup_weight(step, total_steps, mm)
            loss, lx, lu = losses.stage4_loss(logits[:nl], mixed_p[:nl], logits[nl:], mixed_p[nl:], mm,
                                              lambda_u=weight, labeled_fraction=nl / len(all_x))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums["loss"] += loss.item()
            sums["loss_x"] += lx.item()
            sums["loss_u"] += lu.item()
            nb += 1
        for k, v in sums.items():
            mlog.log(4, epoch, k, v / nb)
        mlog.log(4, epoch, "pseudo_label_sum_error", sum_err)
        _log_eval(mlog, 4, epoch, epochs, disc, data.heldout, sc.eval_interval, result)
    return result


# ---------------------------------------------------------------------------
# SSGAN ablation baseline
# ---------------------------------------------------------------------------


class SSGANDiscriminator(nn.Module):
    """Plain strided-conv semi-supervised GAN discriminator with n+1 outputs.

    Returns ``(class_logits (B, n), fake_logit (B, 1))`` so it plugs into the
    same evaluation helpers; the concatenation is the n+1-way output.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.disc_width
        self.image_size = cfg.image_size
        self.body = nn.Sequential(
            nn.Conv2d(1, w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 3, 2, 1), nn.LeakyReLU(0.2),
        )
        side = -(-cfg.image_size // 8)
        self.head = nn.Linear(4 * w * side * side, cfg.n_classes + 1)

    def forward(self, x):
        out = self.head(self.body(x).flatten(1))
        return out[:, :-1], out[:, -1:]


def _nplus1(disc, x):
    logits, fake = disc(x)
    return torch.cat([logits, fake], dim=1)


@dataclass
class SSGANResult:
    discriminator: nn.Module
    generator: Generator
    accuracy: list[tuple[int, float]] = field(default_factory=list)
    generator_frozen_ok: Optional[bool] = None

    @property
    def final_accuracy(self) -> float:
        return self.accuracy[-1][1] if self.accuracy else float("nan")


def run_ssgan_baseline(data: DataBundle, cfg: RunConfig, two_stage: bool, mlog: MetricsLog,
                       epochs: Optional[int] = None, extractor: Optional[nn.Module] = None) -> SSGANResult:
    """Joint semi-supervised GAN training, or GAN-then-classify with a frozen generator.

    Both modes run ``epochs`` passes over the labeled set (default
    ``stage2_epochs``). The two-stage mode spends the first half on the
    least-squares GAN with FID selection and the second half training the
    classifier against the frozen best generator. FID features come from
    ``extractor``, by default a frozen randomly initialized encoder.
    """
    if len(data.labeled) == 0 or len(data.unlabeled) == 0:
        raise ValueError("the SSGAN baseline needs labeled and unlabeled images")
    sc, seed = cfg.stages, cfg.stages.seed
    epochs = sc.stage2_epochs if epochs is None else epochs
    tag = "ssgan_two_stage" if two_stage else "ssgan_joint"
    seed_init(seed, "ssgan")
    gen, disc = Generator(cfg.nets), SSGANDiscriminator(cfg.nets)
    if extractor is None:
        extractor = Encoder(cfg.nets)
    opt_g = _adam(gen.parameters(), cfg, 2)
    opt_d = _adam(disc.parameters(), cfg, 2)
    batch_rng, pool_rng = np_stream(seed, "ssgan", "batch"), np_stream(seed, "ssgan", "pool")
    noise = torch_stream(seed, "ssgan", "noise")
    upool = _Cycler(len(data.unlabeled), pool_rng)
    gan_epochs = epochs // 2 if two_stage else 0
    result = SSGANResult(disc, gen)
    scorer = best = frozen = None
    if two_stage:
        reals = ImageSet.concat(data.labeled, data.unlabeled).images
        scorer = FidScorer(extractor, _fid_real_sample(reals, sc.fid_sample_size, np_stream(seed, "ssgan", "fid")),
                           sc.fid_sample_size, cfg.nets.noise_dim, torch_stream(seed, "ssgan", "fid"))
        best = {"fid": scorer(gen), "g": _params_snapshot(gen), "epoch": 0}
        mlog.log(tag, 0, "fid", best["fid"])
    for epoch in range(1, epochs + 1):
        classify = epoch > gan_epochs
        if two_stage and epoch == gan_epochs + 1:
            gen.load_state_dict(best["g"])
            freeze(gen)
            frozen = _params_snapshot(gen)
        for idx in _batches(len(data.labeled), sc.batch_size, batch_rng):
            x_l, y = data.labeled.images[idx], data.labeled.labels[idx]
            x_u = data.unlabeled.images[upool.take(len(idx))]
            if two_stage and not classify:
                fake = gen(torch.randn(len(idx), cfg.nets.noise_dim, generator=noise))
                # realness is the negated fake-class logit, so both phases agree on its meaning
                real_fake = -_nplus1(disc, torch.cat([x_l, x_u, fake.detach()]))[:, -1:]
                nr = len(x_l) + len(x_u)
                loss_d, _ = losses.lsgan_losses(real_fake[:nr], real_fake[nr:], cfg.gan)
                opt_d.zero_grad(set_to_none=True)
                loss_d.backward()
                opt_d.step()
                loss_g = losses.lsgan_generator_loss(-_nplus1(disc, fake)[:, -1:], cfg.gan)
                opt_g.zero_grad(set_to_none=True)
                loss_g.backward()
                opt_g.step()
                continue
            if two_stage:
                fake = sample_fakes(gen, len(idx), noise)
            else:
                fake = gen(torch.randn(len(idx), cfg.nets.noise_dim, generator=noise))
            out = _nplus1(disc, torch.cat([x_l, x_u, fake.detach()]))
            nl, nu = len(x_l), len(x_u)
            sup, unsup = losses.ssgan_losses(out[:nl], y, out[nl : nl + nu], out[nl + nu :])
            opt_d.zero_grad(set_to_none=True)
            (sup + unsup).backward()
            opt_d.step()
            if not two_stage:
                loss_g = losses.ssgan_generator_loss(_nplus1(disc, fake))
                opt_g.zero_grad(set_to_none=True)
                loss_g.backward()
                opt_g.step()
        if two_stage and not classify and (epoch % sc.fid_eval_interval == 0 or epoch == gan_epochs):
            score = scorer(gen)
            mlog.log(tag, epoch, "fid", score)
            if score < best["fid"]:
                best = {"fid": score, "g": _params_snapshot(gen), "epoch": epoch}
        if epoch % sc.eval_interval == 0 or epoch == epochs:
            acc = evaluate(disc, data.heldout)
            mlog.log(tag, epoch, "top1", acc)
            result.accuracy.append((epoch, acc))
    if two_stage:
        result.generator_frozen_ok = params_equal(frozen, _params_snapshot(gen)) if frozen else True
    return result


# ---------------------------------------------------------------------------
# checkpoints and run orchestration
# ---------------------------------------------------------------------------


def make_checkpoint(cfg: RunConfig, stage: int, kind: str, epoch: int, modules: dict[str, nn.Module],
                    **extra) -> Checkpoint:
    header = {"stage": stage, "kind": kind, "epoch": epoch, "config_hash": cfg.hash(),
              "nets": cfg.to_dict()["nets"], "split": cfg.to_dict()["split"]}
    header.update(extra)
    ckpt = Checkpoint(header)
    for prefix, module in modules.items():
        ckpt.add_module(prefix, module)
    return ckpt


def net_config_from(ckpt: Checkpoint) -> NetConfig:
    doc = dict(ckpt.header["nets"])
    doc["encoder_widths"] = tuple(doc["encoder_widths"])
    return NetConfig(**doc)


def load_generator(path, config_hash: Optional[str] = None) -> Generator:
    ckpt = load_checkpoint(path, stage=2, kind="generator", config_hash=config_hash)
    return freeze(ckpt.load_module("generator", Generator(net_config_from(ckpt))))


def load_discriminator(path, stage: int, config_hash: Optional[str] = None) -> Discriminator:
    ckpt = load_checkpoint(path, stage=stage, kind="discriminator", config_hash=config_hash)
    return ckpt.load_module("discriminator", Discriminator(net_config_from(ckpt)))


def load_classifier(path) -> tuple[Discriminator, Checkpoint]:
    """Any discriminator checkpoint (stage 2-4), for evaluation."""
    ckpt = load_checkpoint(path)
    if ckpt.kind != "discriminator":
        raise LifecycleError(f"{path}: not a classifier checkpoint (kind={ckpt.kind or 'unknown'})")
    disc = ckpt.load_module("discriminator", Discriminator(net_config_from(ckpt)))
    return disc.eval(), ckpt


STAGE_FILES = {
    1: ("stage1", "encoder.ckpt"),
    2: ("stage2", "g_best.ckpt"),
    3: ("stage3", "discriminator.ckpt"),
    4: ("stage4", "classifier.ckpt"),
}


def stage_path(run_dir: Path, stage: int, name: Optional[str] = None) -> Path:
    sub, default = STAGE_FILES[stage]
    return run_dir / sub / (name or default)


@dataclass
class PipelineResult:
    run_dir: Optional[Path]
    log: MetricsLog
    stage1: Optional[Stage1Result] = None
    stage2: Optional[Stage2Result] = None
    stage3: Optional[ClassifierResult] = None
    stage4: Optional[ClassifierResult] = None


def run_stages(cfg: RunConfig, data: DataBundle, stages: Sequence[int] = (1, 2, 3, 4),
               run_dir: Optional[str | Path] = None, mlog: Optional[MetricsLog] = None) -> PipelineResult:
    """Run the requested stages in order, persisting checkpoints when ``run_dir`` is given.

    A stage whose predecessor is not part of this call loads the predecessor's
    checkpoint from ``run_dir``; without one, ``MissingPrerequisite`` is raised.
    """
    stages = sorted(set(stages))
    if not stages or any(s not in STAGE_FILES for s in stages):
        raise ValueError(f"stages must be a non-empty subset of 1-4, got {stages}")
    run_dir = Path(run_dir) if run_dir is not None else None
    if mlog is None:
        mlog = MetricsLog(run_dir / "metrics.csv" if run_dir else None, seed=cfg.stages.seed)
    res = PipelineResult(run_dir, mlog)
    h = cfg.hash()
    encoder = g_best = disc = None

    def need(stage: int, name: Optional[str] = None) -> Path:
        p = stage_path(run_dir, stage, name) if run_dir else None
        if p is None or not p.exists():
            raise MissingPrerequisite(f"stage {stage} checkpoint {name or STAGE_FILES[stage][1]} is required")
        return p

    train_images = ImageSet.concat(data.labeled, data.unlabeled).images
    for stage in stages:
        log.info("stage %d starting", stage)
        if stage == 1:
            r = res.stage1 = run_stage1_pretrain(train_images, cfg, mlog)
            encoder = r.encoder
            if run_dir:
                save_checkpoint(make_checkpoint(cfg, 1, "encoder", cfg.stages.stage1_epochs,
                                                {"encoder": r.encoder, "projector": r.projector,
                                                 "decoder": r.decoder}), stage_path(run_dir, 1))
        elif stage == 2:
            if encoder is None:
                ck = load_checkpoint(need(1), stage=1, kind="encoder", config_hash=h)
                encoder = ck.load_module("encoder", Encoder(net_config_from(ck)))
            gan_real = data.labeled.images if cfg.stages.gan_data == "labeled" else train_images
            r2 = res.stage2 = run_stage2_gan(gan_real, encoder, cfg, mlog)
            g_best, disc = r2.generator, r2.discriminator
            if run_dir:
                save_checkpoint(make_checkpoint(cfg, 2, "generator", r2.best_epoch, {"generator": g_best},
                                                fid=r2.best_fid), stage_path(run_dir, 2))
                save_checkpoint(make_checkpoint(cfg, 2, "discriminator", r2.best_epoch, {"discriminator": disc}),
                                stage_path(run_dir, 2, "discriminator.ckpt"))
        elif stage == 3:
            if g_best is None:
                g_best = load_generator(need(2), h)
            if cfg.stages.stage3_init == "fresh":
                seed_init(cfg.stages.seed, 3)
                disc = Discriminator(cfg.nets)
            elif disc is None:
                disc = load_discriminator(need(2, "discriminator.ckpt"), 2, h)
            r3 = res.stage3 = run_stage3_finetune(data, g_best, disc, cfg, mlog)
            disc = r3.discriminator
            if run_dir:
                save_checkpoint(make_checkpoint(cfg, 3, "discriminator", cfg.stages.stage3_epochs,
                                                {"discriminator": disc}), stage_path(run_dir, 3))
        elif stage == 4:
            if g_best is None:
                g_best = load_generator(need(2), h)
            if disc is None or 3 not in stages:
                disc = load_discriminator(need(3), 3, h)
            r4 = res.stage4 = run_stage4_mixmatch(data, g_best, disc, cfg, mlog)
            if run_dir:
                save_checkpoint(make_checkpoint(cfg, 4, "discriminator", cfg.stages.stage4_epochs,
                                                {"discriminator": r4.discriminator}), stage_path(run_dir, 4))
    return res


def load_data(cfg: RunConfig) -> DataBundle:
    manifest = load_manifest(cfg.manifest)
    if manifest.n_classes != cfg.nets.n_classes:
        raise ValueError(f"manifest has {manifest.n_classes} classes, nets.n_classes={cfg.nets.n_classes}")
    return DataBundle.from_manifest(manifest, cfg.split, cfg.nets.image_size)
