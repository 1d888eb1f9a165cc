"""Single-stage training: batch sampling over a dataset mixture, the train
step, periodic evaluation and resumable checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoder import EncoderConfig
from .errors import CheckpointError, ConfigError, DatasetError
from .evaluation import EvalConfig, evaluate_outputs, run_model
from .losses import compute_losses
from .model import ModelConfig, SceneGraphViT
from .numerics import OptimizerState, adam_step, cosine_lr, gradients, load_arrays, save_arrays
from .scenes import (
    PREDICATES,
    AnnotatedExample,
    augment,
    category_names,
    predicate_frequencies,
    read_dataset,
    rebalance_example,
)
from .text_queries import Vocabulary

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "cls", "l1", "giou", "score", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    steps: int = 5000
    warmup: int = 100
    lr_body: float = 1e-3
    lr_text: float = 1e-5
    eval_interval: int = 1000
    eval_images: int = 100
    m: int = 16
    k: int = 64
    rebalance: bool = False
    augment: bool = True
    shared_mlp: bool = False
    datasets: str = "data"          # comma-separated dataset directories
    weights: str = "1.0"            # comma-separated mixture weights
    image_size: int = 64
    patch_size: int = 8
    dim: int = 64
    layers: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0 or self.warmup < 0:
            raise ConfigError("steps and warmup must be non-negative")
        if self.steps > 0 and self.warmup >= self.steps:
            raise ConfigError("warmup must be below steps")
        if self.eval_interval < 1 or self.steps % self.eval_interval:
            raise ConfigError(f"eval_interval {self.eval_interval} must divide steps {self.steps}")
        w = self.mixture_weights
        if len(w) != len(self.dataset_dirs):
            raise ConfigError("one mixture weight per dataset required")
        if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must be non-negative and sum to 1, got {w}")

    @property
    def dataset_dirs(self) -> list[str]:
        return [d.strip() for d in self.datasets.split(",") if d.strip()]

    @property
    def mixture_weights(self) -> list[float]:
        try:
            return [float(x) for x in self.weights.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"bad weights {self.weights!r}") from None

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(image_size=self.image_size, patch_size=self.patch_size, dim=self.dim,
                            layers=self.layers, heads=self.heads)
        return ModelConfig(encoder=enc, shared_mlp=self.shared_mlp, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _coerce(name: str, typ, raw: str):
    if typ in (bool, "bool"):
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return {"int": int, "float": float, "str": str}.get(typ, typ)(raw.strip())
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None


def config_fields() -> dict[str, str]:
    return {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_overrides(pairs: dict[str, str]) -> dict:
    types = config_fields()
    out = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, types[key], raw)
    return out


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    pairs = read_config_file(path) if path else {}
    pairs.update(overrides or {})
    return TrainConfig(**parse_overrides(pairs))


# -- data -------------------------------------------------------------------------

@dataclass
class Corpus:
    """One training dataset: examples plus its predicate query set."""

    examples: list[AnnotatedExample]
    predicates: list[str]
    frequencies: dict[str, float]


def load_corpus(directory, split: str = "train", side: int = 64) -> Corpus:
    directory = Path(directory)
    path = directory / f"{split}.jsonl"
    if not path.exists():
        raise DatasetError(f"{path} not found")
    meta_path = directory / "meta.json"
    preds = list(PREDICATES)
    if meta_path.exists():
        preds = json.loads(meta_path.read_text(encoding="utf-8"))["predicates"]
    examples = read_dataset(path, side=side)
    freqs = predicate_frequencies(examples) if any(ex.gt.triplets for ex in examples) else {}
    return Corpus(examples=examples, predicates=preds, frequencies=freqs)


def sample_batch(corpora: Sequence[Corpus], weights: Sequence[float], rng: np.random.Generator,
                 batch_size: int, do_augment: bool = True, do_rebalance: bool = False) -> list[AnnotatedExample]:
    """Each slot draws a dataset by weight, then an example uniformly."""
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError("mixture weights must sum to 1")
    for c, wi in zip(corpora, w):
        if wi > 0 and not c.examples:
            raise ConfigError("dataset with non-zero weight is empty")
    batch = []
    for _ in range(batch_size):
        d = int(rng.choice(len(corpora), p=w))
        ex = corpora[d].examples[int(rng.integers(len(corpora[d].examples)))]
        if do_augment:
            ex = augment(ex, rng)
        if do_rebalance:
            ex = rebalance_example(ex, corpora[d].frequencies, rng)
        batch.append(ex)
    return batch


def predicate_union(corpora: Sequence[Corpus]) -> list[str]:
    wanted = {p for c in corpora for p in c.predicates}
    return [p for p in PREDICATES if p in wanted] + sorted(wanted - set(PREDICATES))


# -- state ------------------------------------------------------------------------

@dataclass
class TrainState:
    model: SceneGraphViT
    opt: OptimizerState
    rng: np.random.Generator
    object_names: list[str]
    predicate_names: list[str]
    history: list[dict] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.opt.step


def init_state(cfg: TrainConfig, predicate_names: Sequence[str]) -> TrainState:
    model = SceneGraphViT(cfg.model_config(), vocab=Vocabulary())
    params = model.param_dict()
    text = set(model.text_parameter_names())
    peak = {n: (cfg.lr_text if n in text else cfg.lr_body) for n in params}
    opt = OptimizerState.create(params, peak, cfg.warmup, cfg.steps)
    rng = np.random.default_rng([cfg.seed, 1])
    return TrainState(model, opt, rng, category_names(), list(predicate_names))


def train_step(state: TrainState, batch: Sequence[AnnotatedExample], cfg: TrainConfig) -> dict:
    """Forward, match, four losses, backward, one Adam update. Returns the loss row."""
    model = state.model
    lr = cosine_lr(state.step, cfg.warmup, cfg.steps, cfg.lr_body)
    images = np.stack([ex.image for ex in batch])
    oq = model.embed_queries(state.object_names)
    pq = model.embed_queries(state.predicate_names)
    out = model.forward(images, oq, pq, cfg.m, cfg.k)
    report, _ = compute_losses(out, [ex.gt for ex in batch], state.object_names, state.predicate_names)
    params = model.param_dict()
    grads = dict(zip(params, gradients(report.total, list(params.values()))))
    adam_step(state.opt, params, grads)
    row = {"step": state.step, **report.values(), "lr": lr}
    state.history.append(row)
    return row


def save_state(state: TrainState, path, cfg: TrainConfig) -> None:
    arrays = {}
    for name, t in state.model.param_dict().items():
        arrays[f"param/{name}"] = t.data
        arrays[f"adam_m/{name}"] = state.opt.m[name]
        arrays[f"adam_v/{name}"] = state.opt.v[name]
    meta = {
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "train_config": cfg.to_dict(),
        "model_config": state.model.cfg.to_dict(),
        "vocab": state.model.text.vocab.tokens[:-1],
        "object_names": state.object_names,
        "predicate_names": state.predicate_names,
        "peak_lr": state.opt.peak_lr,
        "history": state.history,
    }
    save_arrays(path, arrays, meta)


def load_state(path) -> tuple[TrainState, TrainConfig]:
    arrays, meta = load_arrays(path)
    try:
        cfg = TrainConfig(**meta["train_config"])
        model = SceneGraphViT(ModelConfig.from_dict(meta["model_config"]), vocab=Vocabulary(meta["vocab"]))
        model.load_state_dict({n[len("param/"):]: a for n, a in arrays.items() if n.startswith("param/")})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: incompatible checkpoint contents: {exc}") from None
    opt = OptimizerState(peak_lr=meta["peak_lr"], warmup=cfg.warmup, total=cfg.steps, step=meta["step"],
                         m={n[len("adam_m/"):]: a for n, a in arrays.items() if n.startswith("adam_m/")},
                         v={n[len("adam_v/"):]: a for n, a in arrays.items() if n.startswith("adam_v/")})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(model, opt, rng, meta["object_names"], meta["predicate_names"], meta["history"])
    return state, cfg


def load_model(path) -> tuple[SceneGraphViT, dict]:
    """Model and metadata from a checkpoint, ready for inference."""
    state, cfg = load_state(path)
    return state.model, {"object_names": state.object_names, "predicate_names": state.predicate_names,
                         "m": cfg.m, "k": cfg.k, "step": state.step}


def loss_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for row in history:
        w.writerow([row["step"]] + [repr(float(row[c])) for c in LOSS_COLUMNS[1:]])
    return buf.getvalue()


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:06d}.sgv"


def train(cfg: TrainConfig, out_dir, corpora: Sequence[Corpus] | None = None, resume=None,
          stop_at: int | None = None, on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Run (or resume) training, writing checkpoints, ``loss.csv`` and ``eval.csv``.

    ``stop_at`` ends the run early (for interruption tests) after saving state.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if corpora is None:
        corpora = [load_corpus(d, side=cfg.image_size) for d in cfg.dataset_dirs]
    if resume is not None:
        state, saved = load_state(resume)
        if saved.to_dict() != cfg.to_dict():
            raise ConfigError("resume config differs from the checkpoint's config")
    else:
        state = init_state(cfg, predicate_union(corpora))
        save_state(state, checkpoint_path(out, 0), cfg)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    while state.step < end:
        batch = sample_batch(corpora, cfg.mixture_weights, state.rng, cfg.batch_size,
                             cfg.augment, cfg.rebalance)
        row = train_step(state, batch, cfg)
        if on_step is not None:
            on_step(row)
        if state.step % cfg.eval_interval == 0:
            save_state(state, checkpoint_path(out, state.step), cfg)
            periodic_eval(state, cfg, out)
    save_state(state, out / "last.sgv", cfg)
    (out / "loss.csv").write_text(loss_csv(state.history), encoding="utf-8")
    return state


def periodic_eval(state: TrainState, cfg: TrainConfig, out: Path) -> None:
    """Validation metrics appended to ``eval.csv``; skipped when no val split exists."""
    val = []
    for d in cfg.dataset_dirs:
        p = Path(d) / "val.jsonl"
        if p.exists():
            val.extend(read_dataset(p, side=cfg.image_size)[: cfg.eval_images])
    if not val:
        return
    outs = run_model(state.model, np.stack([ex.image for ex in val]), state.object_names,
                     state.predicate_names, cfg.m, cfg.k)
    rep, _, _ = evaluate_outputs(outs, [ex.gt for ex in val], state.object_names,
                                 state.predicate_names, EvalConfig())
    path = out / "eval.csv"
    lines = [] if path.exists() else ["step,metric,name,value"]
    lines += [f"{state.step},{m},{n},{v!r}" for m, n, v in rep.rows() if m in ("R@K", "mR@K", "box_recall")]
    existing = path.read_text(encoding="utf-8") if path.exists() else ""
    kept = [ln for ln in existing.splitlines() if ln and not ln.startswith(f"{state.step},")]
    path.write_text("\n".join(kept + lines) + "\n", encoding="utf-8")
    log.info("step %d val mR@20 %.3f", state.step, rep.get("mR@K", "constrained@20"))
