"""Stage implementations shared by the command line and the acceptance suite.

A run directory holds::

    config.json
    checkpoints/   segmentation.ckpt, encoder.ckpt, head.ckpt
    predictions/   predicted class maps, one PGM per image
    patches/       patches.npz (canvases with subject, segment and split)
    metrics/       metrics.json, per_bone.csv, summary.json, ablation.json
    logs/          one JSON-lines file per training stage

Each stage reads only upstream artifacts and raises
:class:`MissingArtifactError` naming the stage that produces a missing one.
"""

from __future__ import annotations

import json
import logging
import shutil
import zlib
from pathlib import Path

import numpy as np

from . import clsfinetune as cls
from .config import RunConfig, load_config, with_overrides
from .cropaug import AugmentConfig, ViewSpec
from .dataio import (
    Dataset,
    extract_patches,
    hand_to_annotated,
    load_mask,
    random_patches,
    save_mask,
    split_subjects,
    synth_ambiguous,
    synth_hand,
    to_canvas,
)
from .diffcore import functional as F
from .diffcore.checkpoint import load_checkpoint, save_checkpoint
from .diffcore.nn import Linear
from .diffcore.optim import Adam
from .diffcore.tensor import Tape, Tensor
from .errors import ContractError, MissingArtifactError
from .mixunet import MixtureNet, NetConfig
from .pretrain import Encoder, PretrainConfig, Pretrainer, pretrain_epoch, resize_square
from .segtrain import SegTrainConfig, predict_batch, train_segmentation

log = logging.getLogger("osteoscreen")

ABLATIONS = {
    "no-segmentation": {"ablation": {"segmentation": False}},
    "no-pretrain": {"pretraining": {"mode": "none"}},
    "conventional-crop": {"views": {"crop_mode": "conventional"}},
}
DELTA_KEYS = ("f1", "auc", "accuracy")


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(stage.encode())])


class Run:
    def __init__(self, root, cfg: RunConfig | None = None):
        self.root = Path(root)
        if cfg is None:
            if not (self.root / "config.json").exists():
                raise MissingArtifactError("init", self.root / "config.json")
            cfg = load_config(self.root / "config.json")
        self.cfg = cfg

    # -- layout -------------------------------------------------------------
    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def dataset_dir(self) -> Path:
        p = Path(self.cfg.dataset)
        return p if p.is_absolute() else self.root / p

    def init(self) -> "Run":
        for d in ("checkpoints", "metrics", "logs"):
            self.path(d).mkdir(parents=True, exist_ok=True)
        self.path("config.json").write_text(self.cfg.dump())
        return self

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(stage, path)
        return path

    def dataset(self) -> Dataset:
        self.require(self.dataset_dir / "manifest.json", "synth")
        return Dataset(self.dataset_dir)

    def jsonl(self, name: str):
        self.path("logs").mkdir(parents=True, exist_ok=True)
        fh = open(self.path("logs", f"{name}.jsonl"), "w")
        return fh, lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def synth_dataset(out, kind: str = "hand", n: int = 500, size: int = 64, seed: int = 0,
                  prevalence: float = 0.285, signal: float = 1.0, modes: int = 2) -> Dataset:
    rng = np.random.default_rng(seed)
    if kind == "hand":
        items = [hand_to_annotated(s) for s in synth_hand(n, size, rng, prevalence, signal)]
        num_classes = 8
    elif kind == "ambiguous":
        items = synth_ambiguous(n, size, modes, rng=rng)
        num_classes = 2
    else:
        raise ContractError(f"unknown dataset kind {kind!r}")
    train, val, test = split_subjects([it.image_id for it in items], seed)
    return Dataset.write(out, items, kind, num_classes, {"train": train, "val": val, "test": test})


def ensure_dataset(run: Run) -> Dataset:
    if not (run.dataset_dir / "manifest.json").exists():
        d = run.cfg.data
        synth_dataset(run.dataset_dir, "hand", d.n, d.size, d.seed, d.prevalence, d.signal)
    return run.dataset()


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def _net_config(run: Run, num_classes: int) -> NetConfig:
    s = run.cfg.segmentation
    return NetConfig(num_classes=num_classes, K=s.K, S=s.S, L=s.L, F1=s.F1, F2=s.F2)


def segment_train(run: Run, dump_plan=None) -> None:
    ds = run.dataset()
    s = run.cfg.segmentation
    net = MixtureNet(_net_config(run, ds.num_classes), stage_rng(run.cfg.seed, "segment-init"))
    items = [ds.annotated(i) for i in ds.ids("train")]
    tcfg = SegTrainConfig(steps=s.steps, batch=s.batch, lr=s.lr, lam=s.lam, gamma0=s.gamma0,
                          anneal_fraction=s.anneal_fraction, epsilon=s.epsilon,
                          sinkhorn_iters=s.sinkhorn_iters, plan_cost=s.plan_cost)
    fh, write = run.jsonl("segment_train")
    with fh:
        train_segmentation(net, items, tcfg, stage_rng(run.cfg.seed, "segment-train"), write, dump_plan)
    save_checkpoint(run.path("checkpoints", "segmentation.ckpt"), net.state_dict(),
                    {"net": net.config.to_dict(), "train": tcfg.to_dict()})


def load_segmentation(run: Run) -> MixtureNet:
    state, meta = load_checkpoint(run.require(run.path("checkpoints", "segmentation.ckpt"), "segment-train"))
    net = MixtureNet(NetConfig(**meta["net"]), np.random.default_rng(0))
    net.load_state_dict(state)
    return net


def segment_predict(run: Run, batch: int = 16) -> None:
    net = load_segmentation(run)
    ds = run.dataset()
    ids = ds.ids()
    rng = stage_rng(run.cfg.seed, "segment-predict")
    out = run.path("predictions")
    out.mkdir(parents=True, exist_ok=True)
    for start in range(0, len(ids), batch):
        chunk = ids[start:start + batch]
        images = np.stack([ds.image(i) for i in chunk])
        for image_id, (mask, _conf, _pi, _atoms) in zip(chunk, predict_batch(net, images, net.config.S, rng)):
            save_mask(out / f"{image_id}.pgm", mask)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def extract_stage(run: Run) -> dict:
    ds = run.dataset()
    cfg = run.cfg
    rng = stage_rng(cfg.seed, "extract-patches")
    split_of = {i: name for name, ids in ds.splits.items() for i in ids}
    canvases, subjects, segments, splits = [], [], [], []
    empty = 0
    for image_id in ds.ids():
        image = ds.image(image_id)
        if cfg.ablation.segmentation:
            mask = load_mask(run.require(run.path("predictions", f"{image_id}.pgm"), "segment-predict"))
            patches = extract_patches(image, mask, subject_id=image_id)
        else:
            patches = random_patches(image, cfg.ablation.random_crops, cfg.ablation.random_crop_size, rng, image_id)
        if not patches:
            # no bone found: keep the subject scorable from the whole image
            empty += 1
            patches = random_patches(image, 1, min(image.shape), rng, image_id)
            patches[0].segment_id = "image"
        for p in patches:
            canvases.append(to_canvas(p.crop, cfg.views.canvas))
            subjects.append(image_id)
            segments.append(p.segment_id)
            splits.append(split_of[image_id])
    labels = {i: int(ds.meta(i)["label"]) for i in ds.ids()}
    run.path("patches").mkdir(parents=True, exist_ok=True)
    np.savez(run.path("patches", "patches.npz"), canvases=np.stack(canvases), subjects=np.array(subjects),
             segments=np.array(segments), splits=np.array(splits))
    run.path("patches", "labels.json").write_text(json.dumps(labels, sort_keys=True))
    return {"patches": len(canvases), "subjects_without_bone": empty}


class PatchSet:
    def __init__(self, run: Run):
        path = run.require(run.path("patches", "patches.npz"), "extract-patches")
        with np.load(path) as data:
            self.canvases = data["canvases"]
            self.subjects = data["subjects"].tolist()
            self.segments = data["segments"].tolist()
            self.splits = data["splits"]
        self.labels = json.loads(run.path("patches", "labels.json").read_text())

    def select(self, split: str):
        idx = np.flatnonzero(self.splits == split)
        return (self.canvases[idx], [self.subjects[i] for i in idx], [self.segments[i] for i in idx],
                np.array([self.labels[self.subjects[i]] for i in idx]))


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _pretrain_config(cfg: RunConfig) -> PretrainConfig:
    p, v, a = cfg.pretraining, cfg.views, cfg.augmentation
    min_nonzero = v.min_nonzero if v.crop_mode == "constrained" else 0.0
    return PretrainConfig(
        epochs=p.epochs, batch=p.batch, temperature=p.temperature, base_lr=p.base_lr, min_lr=p.min_lr,
        trust_coefficient=p.trust_coefficient, momentum=p.momentum, weight_decay=p.weight_decay,
        augment=AugmentConfig(**a.model_dump(), seed=cfg.seed),
        views=ViewSpec(v.n_global, v.global_size, v.n_local, v.local_size, min_nonzero, v.max_attempts),
    )


def pretrain_stage(run: Run) -> dict:
    cfg = run.cfg
    if cfg.pretraining.mode == "none":
        return {"skipped": True}
    patches = PatchSet(run)
    images, subjects, segments, _ = patches.select("train")
    sources = [f"{s}/{g}/{i}" for i, (s, g) in enumerate(zip(subjects, segments))]
    pcfg = _pretrain_config(cfg)
    encoder = Encoder(stage_rng(cfg.seed, "encoder-init"))
    steps_per_epoch = int(np.ceil(len(images) / pcfg.batch))
    trainer = Pretrainer(encoder, pcfg, steps_per_epoch)
    rng = stage_rng(cfg.seed, "pretrain")
    fh, write = run.jsonl("pretrain")
    losses = []
    with fh:
        for epoch in range(pcfg.epochs):
            loss = pretrain_epoch(trainer, list(images), sources, rng)
            losses.append(loss)
            write({"epoch": epoch, "loss": loss, "fallbacks": trainer.crop_stats.fallbacks})
    save_checkpoint(run.path("checkpoints", "encoder.ckpt"), encoder.state_dict(),
                    {"pretrain": {"epochs": pcfg.epochs, "losses": losses}})
    return {"losses": losses, "crop_fallbacks": trainer.crop_stats.fallbacks}


def load_encoder(run: Run, name: str = "encoder.ckpt", stage: str = "pretrain") -> Encoder:
    state, _ = load_checkpoint(run.require(run.path("checkpoints", name), stage))
    enc = Encoder(np.random.default_rng(0))
    enc.load_state_dict(state)
    return enc


def encode(encoder: Encoder, canvases: np.ndarray, size: int, batch: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(canvases), batch):
        x = np.stack([resize_square(c, size) for c in canvases[start:start + batch]])[:, None]
        out.append(encoder.represent(Tensor(x)).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# fine-tuning and evaluation
# ---------------------------------------------------------------------------

def _supervised(run: Run, patches: PatchSet) -> tuple[Encoder, cls.LinearHead, list[dict]]:
    """Encoder and head trained jointly from scratch on un-augmented patches."""
    cfg = run.cfg
    f = cfg.finetuning
    size = cfg.views.global_size
    rng = stage_rng(cfg.seed, "supervised")
    encoder = Encoder(stage_rng(cfg.seed, "encoder-init"))
    x_tr, _, _, y_tr = patches.select("train")
    if len(np.unique(y_tr)) < 2:
        raise ContractError("fine-tuning needs both classes in the training set")
    x_tr = np.stack([resize_square(c, size) for c in x_tr])[:, None]
    x_va, s_va, _, _ = patches.select("val")
    head = cls.LinearHead(encoder.R, rng)
    params = encoder.backbone_parameters() + head.parameters()
    opt = Adam(params, lr=f.supervised_lr, weight_decay=f.weight_decay)
    cw = cls.class_weights(y_tr, f.balanced)
    history, best, best_state = [], -1.0, None
    eval_every = max(1, f.supervised_steps // 20)
    for step in range(1, f.supervised_steps + 1):
        idx = rng.choice(len(x_tr), min(f.supervised_batch, len(x_tr)), replace=False)
        opt.zero_grad()
        with Tape() as tape:
            logits = head.layer(encoder.represent(Tensor(x_tr[idx])))
            loss = F.cross_entropy(logits, y_tr[idx], None if cw is None else cw[y_tr[idx]])
        tape.backward(loss)
        opt.step()
        if step % eval_every == 0 or step == f.supervised_steps:
            probs = head.predict_proba(encode(encoder, x_va, size))
            report = cls.evaluate_subjects(probs, s_va, patches.labels)
            report.update(step=step, train_loss=loss.item())
            history.append(report)
            if report["macro_f1"] > best:
                best = report["macro_f1"]
                best_state = (encoder.state_dict(), head.state_dict())
    encoder.load_state_dict(best_state[0])
    head.load_state_dict(best_state[1])
    return encoder, head, history


def finetune_stage(run: Run) -> dict:
    cfg = run.cfg
    patches = PatchSet(run)
    size = cfg.views.global_size
    if cfg.pretraining.mode == "none":
        encoder, head, history = _supervised(run, patches)
        save_checkpoint(run.path("checkpoints", "encoder_supervised.ckpt"), encoder.state_dict(), {})
    else:
        encoder = load_encoder(run)
        x_tr, _, _, y_tr = patches.select("train")
        x_va, s_va, _, _ = patches.select("val")
        f = cfg.finetuning
        fcfg = cls.FinetuneConfig(f.epochs, f.lr, f.weight_decay, f.balanced, f.eval_every)
        head, history = cls.finetune(encode(encoder, x_tr, size), y_tr, fcfg, stage_rng(cfg.seed, "finetune"),
                                     (encode(encoder, x_va, size), s_va, patches.labels))
    save_checkpoint(run.path("checkpoints", "head.ckpt"), head.state_dict(), {"mode": cfg.pretraining.mode})
    fh, write = run.jsonl("finetune")
    with fh:
        for rec in history:
            write(rec)
    return {"validation": history[cls.select_best(history)] if history else None}


def evaluate_stage(run: Run) -> dict:
    cfg = run.cfg
    state, meta = load_checkpoint(run.require(run.path("checkpoints", "head.ckpt"), "finetune"))
    if meta.get("mode") == "none":
        encoder = load_encoder(run, "encoder_supervised.ckpt", "finetune")
    else:
        encoder = load_encoder(run)
    head = cls.LinearHead(encoder.R, np.random.default_rng(0))
    head.load_state_dict(state)
    patches = PatchSet(run)
    x_te, s_te, g_te, _ = patches.select("test")
    probs = head.predict_proba(encode(encoder, x_te, cfg.views.global_size))
    report = cls.evaluate_subjects(probs, s_te, patches.labels)
    run.path("metrics").mkdir(parents=True, exist_ok=True)
    run.path("metrics", "metrics.json").write_text(cls.metrics_json(report, cfg.seed))
    run.path("metrics", "per_bone.csv").write_text(cls.per_bone_table(g_te, probs[:, 1]))
    return report


# ---------------------------------------------------------------------------
# whole runs, seeds and ablations
# ---------------------------------------------------------------------------

def _same_upstream(a: RunConfig, b: RunConfig) -> bool:
    keys = ("seed", "dataset", "data", "segmentation")
    da, db = a.model_dump(mode="json"), b.model_dump(mode="json")
    return all(da[k] == db[k] for k in keys)


def run_pipeline(root, cfg: RunConfig, reuse=None) -> dict:
    """All stages for one seed.  ``reuse`` is a finished run whose segmentation
    artifacts are copied when data, segmentation settings and seed coincide
    (they would be regenerated bit-identically otherwise)."""
    run = Run(root, cfg).init()
    ensure_dataset(run)
    if cfg.ablation.segmentation:
        if reuse is not None and _same_upstream(cfg, reuse.cfg) and reuse.path("predictions").exists():
            shutil.copy2(reuse.path("checkpoints", "segmentation.ckpt"), run.path("checkpoints", "segmentation.ckpt"))
            shutil.copytree(reuse.path("predictions"), run.path("predictions"), dirs_exist_ok=True)
        else:
            segment_train(run)
            segment_predict(run)
    extract_stage(run)
    pretrain_stage(run)
    finetune_stage(run)
    return evaluate_stage(run)


def run_seeds(root, cfg: RunConfig, seeds, reuse_root=None) -> dict:
    root = Path(root)
    reports = []
    for seed in seeds:
        seeded = with_overrides(cfg, {"seed": int(seed)})
        if not Path(seeded.dataset).is_absolute():
            seeded = with_overrides(seeded, {"dataset": str((root / seeded.dataset).resolve())})
        reuse = None
        if reuse_root is not None and (Path(reuse_root) / f"seed_{seed}" / "config.json").exists():
            reuse = Run(Path(reuse_root) / f"seed_{seed}")
        report = run_pipeline(root / f"seed_{seed}", seeded, reuse)
        report["seed"] = int(seed)
        reports.append(report)
    summary = {"seeds": [int(s) for s in seeds], "per_seed": reports, "summary": cls.summarize_seeds(reports)}
    (root / "metrics").mkdir(parents=True, exist_ok=True)
    (root / "metrics" / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    (root / "config.json").write_text(cfg.dump())
    return summary


def ablate(mode: str, baseline_root, out_root) -> dict:
    if mode not in ABLATIONS:
        raise ContractError(f"unknown ablation {mode!r}; choose from {sorted(ABLATIONS)}")
    baseline_root = Path(baseline_root)
    summary_path = baseline_root / "metrics" / "summary.json"
    if not summary_path.exists():
        raise MissingArtifactError("run", summary_path)
    base = json.loads(summary_path.read_text())
    cfg = with_overrides(load_config(baseline_root / "config.json"), ABLATIONS[mode])
    if not Path(cfg.dataset).is_absolute():
        cfg = with_overrides(cfg, {"dataset": str((baseline_root / cfg.dataset).resolve())})
    ablated = run_seeds(out_root, cfg, base["seeds"], reuse_root=baseline_root)
    table = {}
    for k in DELTA_KEYS:
        b = base["summary"][k]["mean"]
        a = ablated["summary"][k]["mean"]
        table[k] = {"baseline": b, "ablated": a, "delta": None if a is None or b is None else a - b,
                    "baseline_std": base["summary"][k]["std"], "ablated_std": ablated["summary"][k]["std"]}
    report = {"mode": mode, "seeds": base["seeds"], "metrics": table}
    (Path(out_root) / "metrics" / "ablation.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report
