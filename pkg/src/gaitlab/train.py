"""AdamW training of the trainable subset (decoder + head), checkpoints, evaluation.

Only the temporal decoder and the linear head are ever optimized; both stub
encoders are frozen by construction. Because the frozen branches are
deterministic functions of the input, each clip's visual features and pooled
backbone descriptor are computed once up front and reused every epoch.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .core import (
    ChannelTable,
    Manifest,
    SkelSequence,
    Taxonomy,
    parse_skeleton_sequence,
    sample_frames,
)
from .errors import (
    ClassMismatch,
    EmptyClass,
    EmptySplit,
    HeaderMismatch,
    InvalidConfig,
    ShapeMismatch,
)
from .fusion import (
    BackboneConfig,
    ClassWeights,
    HeadParams,
    StubBackbone,
    StubVisualEncoder,
    VisualStubConfig,
    class_weights,
    concat_final,
    embed_tokens,
    fuse_and_encode,
    zero_descriptor,
)
from .tokenizer import TokenizerConfig, assemble_prompt, render_sequence, tokenize_and_truncate
from .ted import TedConfig, init_ted, ted_forward
from .util import rng_for

ABLATIONS = ("full", "no_ted", "no_bio", "neither")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 2
    epochs: int = 40
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise InvalidConfig("lr, epochs, and batch_size must be positive")
        if self.ablation not in ABLATIONS:
            raise InvalidConfig(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @property
    def use_ted(self) -> bool:
        return self.ablation in ("full", "no_bio")

    @property
    def use_bio(self) -> bool:
        return self.ablation in ("full", "no_ted")


@dataclass(frozen=True)
class PipelineConfig:
    """Wiring of the frozen branches around the trainable core.

    The training tokenizer prints whole degrees: with hash embeddings,
    coarser values repeat across clips of a class, which is what makes the
    token stream a generalizable signal rather than a clip fingerprint.
    The frame count keeps the effective sampling rate above twice the
    fastest archetype's stride frequency, so rhythm classes stay resolvable
    after subsampling.
    """

    frames: int = 20
    ted: TedConfig = field(default_factory=TedConfig)
    tokenizer: TokenizerConfig = field(default_factory=lambda: TokenizerConfig(decimals=0))
    visual: VisualStubConfig = field(default_factory=VisualStubConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    embed_seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise InvalidConfig("frames must be positive")
        if not (self.ted.D == self.visual.D == self.backbone.D):
            raise InvalidConfig(
                f"model dims disagree: ted={self.ted.D} visual={self.visual.D} backbone={self.backbone.D}"
            )


@dataclass
class ModelBundle:
    pipeline: PipelineConfig
    taxonomy: Taxonomy
    ted_params: TedParams
    head: HeadParams
    backbone: StubBackbone
    visual: StubVisualEncoder

    def trainable_parameters(self) -> list[Parameter]:
        return self.ted_params.parameters() + self.head.parameters()


def build_bundle(pipeline: PipelineConfig, taxonomy: Taxonomy, seed: int) -> ModelBundle:
    return ModelBundle(
        pipeline=pipeline,
        taxonomy=taxonomy,
        ted_params=init_ted(pipeline.ted, pipeline.frames, seed),
        head=HeadParams.init(taxonomy.K, pipeline.ted.D, seed),
        backbone=StubBackbone(pipeline.backbone),
        visual=StubVisualEncoder(pipeline.visual),
    )


@dataclass
class PreparedClip:
    clip_id: str
    label_index: int
    V: np.ndarray       # T x D frozen visual features
    f_vlm: np.ndarray   # D, frozen fused descriptor under the active ablation


def prepare_clip(bundle: ModelBundle, seq: SkelSequence, use_bio: bool) -> PreparedClip:
    """Run the frozen branches once for a clip (exact: they never change)."""
    sampled = sample_frames(seq, bundle.pipeline.frames)
    feats = bundle.visual.encode_sequence(sampled)
    if use_bio:
        table = ChannelTable.default()
        bio = render_sequence(sampled, table, bundle.pipeline.tokenizer)
        prompt = assemble_prompt(bio, bundle.taxonomy, bundle.pipeline.tokenizer)
        tokens = tokenize_and_truncate(prompt, bundle.pipeline.tokenizer.max_tokens)
        e_bio = embed_tokens(tokens, bundle.pipeline.ted.D, bundle.pipeline.embed_seed)
    else:
        e_bio = Tensor(np.zeros((0, bundle.pipeline.ted.D)))
    f_vlm = fuse_and_encode(feats.values, e_bio, bundle.backbone)
    label_index = bundle.taxonomy.index(seq.label) if seq.label in bundle.taxonomy else -1
    return PreparedClip(clip_id=seq.clip_id, label_index=label_index, V=feats.values, f_vlm=f_vlm.data)


def clip_logits(bundle: ModelBundle, prep: PreparedClip, use_ted: bool) -> Tensor:
    if use_ted:
        f_temp = ted_forward(bundle.ted_params, prep.V).f_temp
    else:
        f_temp = zero_descriptor(bundle.pipeline.ted.D)
    f_final = concat_final(Tensor(prep.f_vlm), f_temp)
    return bundle.head.logits(f_final)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


ADAM_EPS = 1e-8


def adamw_step(params: list[Parameter], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update over the trainable parameters."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.betas
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param {p.name} shape {p.data.shape}")
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        theta = p.tensor.data
        if cfg.weight_decay:
            theta -= cfg.lr * cfg.weight_decay * theta
        theta -= cfg.lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all grads in place so their joint L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"GAITLAB-CKPT v1\n"


@dataclass
class Checkpoint:
    pipeline: PipelineConfig
    train_cfg: TrainConfig
    taxonomy: Taxonomy
    epoch: int
    loss_history: list[float]
    seed: int
    stub_hash: str
    class_counts: tuple[int, ...]
    tensors: dict[str, np.ndarray]
    adam: AdamState


def _tokenizer_to_json(t: TokenizerConfig) -> dict:
    return {
        "channel_subset": [list(c) for c in t.channel_subset],
        "decimals": t.decimals,
        "max_tokens": t.max_tokens,
        "instruction_text": t.instruction_text,
        "class_definitions": dict(t.class_definitions),
    }


def _tokenizer_from_json(obj: dict) -> TokenizerConfig:
    return TokenizerConfig(
        channel_subset=tuple(tuple(c) for c in obj["channel_subset"]),
        decimals=obj["decimals"],
        max_tokens=obj["max_tokens"],
        instruction_text=obj["instruction_text"],
        class_definitions=dict(obj["class_definitions"]),
    )


def pipeline_to_json(p: PipelineConfig) -> dict:
    visual = vars(p.visual).copy()
    visual["channels"] = [list(c) for c in p.visual.channels]
    return {
        "frames": p.frames,
        "ted": vars(p.ted).copy(),
        "tokenizer": _tokenizer_to_json(p.tokenizer),
        "visual": visual,
        "backbone": vars(p.backbone).copy(),
        "embed_seed": p.embed_seed,
    }


def pipeline_from_json(obj: dict) -> PipelineConfig:
    visual = dict(obj["visual"])
    visual["channels"] = tuple(tuple(c) for c in visual["channels"])
    return PipelineConfig(
        frames=obj["frames"],
        ted=TedConfig(**obj["ted"]),
        tokenizer=_tokenizer_from_json(obj["tokenizer"]),
        visual=VisualStubConfig(**visual),
        backbone=BackboneConfig(**obj["backbone"]),
        embed_seed=obj["embed_seed"],
    )


def train_cfg_to_json(c: TrainConfig) -> dict:
    d = vars(c).copy()
    d["betas"] = list(c.betas)
    return d


def train_cfg_from_json(obj: dict) -> TrainConfig:
    obj = dict(obj)
    obj["betas"] = tuple(obj["betas"])
    return TrainConfig(**obj)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    names = sorted(ckpt.tensors)
    adam_names = sorted(ckpt.adam.m)
    directory = []
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float64)
        directory.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(arr.tobytes())
    for kind in ("m", "v"):
        store = getattr(ckpt.adam, kind)
        for name in adam_names:
            arr = np.ascontiguousarray(store[name], dtype=np.float64)
            directory.append({"name": f"adam.{kind}.{name}", "shape": list(arr.shape), "offset": len(payload)})
            payload.extend(arr.tobytes())
    meta = {
        "pipeline": pipeline_to_json(ckpt.pipeline),
        "train_cfg": train_cfg_to_json(ckpt.train_cfg),
        "taxonomy": list(ckpt.taxonomy.classes),
        "epoch": ckpt.epoch,
        "loss_history": ckpt.loss_history,
        "seed": ckpt.seed,
        "stub_hash": ckpt.stub_hash,
        "class_counts": list(ckpt.class_counts),
        "adam_step": ckpt.adam.step,
        "tensors": directory,
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(json.dumps(meta, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(bytes(payload))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise HeaderMismatch(f"{path} is not a gaitlab checkpoint")
        meta_line = fh.readline()
        meta = json.loads(meta_line.decode("utf-8"))
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    adam = AdamState(step=meta["adam_step"])
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arr = np.frombuffer(payload, dtype=np.float64, count=count, offset=off).reshape(shape).copy()
        name = entry["name"]
        if name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = arr
        else:
            tensors[name] = arr
    return Checkpoint(
        pipeline=pipeline_from_json(meta["pipeline"]),
        train_cfg=train_cfg_from_json(meta["train_cfg"]),
        taxonomy=Taxonomy(tuple(meta["taxonomy"])),
        epoch=meta["epoch"],
        loss_history=list(meta["loss_history"]),
        seed=meta["seed"],
        stub_hash=meta["stub_hash"],
        class_counts=tuple(meta["class_counts"]),
        tensors=tensors,
        adam=adam,
    )


def _bundle_tensors(bundle: ModelBundle) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in bundle.trainable_parameters()}


def _load_tensors_into(bundle: ModelBundle, tensors: dict[str, np.ndarray]) -> None:
    for p in bundle.trainable_parameters():
        if p.name not in tensors:
            raise ClassMismatch(f"checkpoint is missing tensor {p.name!r}")
        if tensors[p.name].shape != p.data.shape:
            raise ClassMismatch(
                f"checkpoint tensor {p.name!r} has shape {tensors[p.name].shape}, expected {p.data.shape}"
            )
        p.data[...] = tensors[p.name]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _resolve(path: str, base_dir: str | None) -> str:
    if base_dir and not os.path.isabs(path):
        return os.path.join(base_dir, path)
    return path


def load_split_clips(
    manifest: Manifest, clip_ids, base_dir: str | None = None
) -> list[SkelSequence]:
    by_clip = manifest.by_clip()
    seqs = []
    for cid in clip_ids:
        rec = by_clip[cid]
        with open(_resolve(rec.path, base_dir), "rb") as fh:
            seqs.append(parse_skeleton_sequence(fh))
    return seqs


def training_class_weights(labels: list[str], taxonomy: Taxonomy) -> ClassWeights:
    counts = [0] * taxonomy.K
    for lab in labels:
        counts[taxonomy.index(lab)] += 1
    if any(c == 0 for c in counts):
        missing = [taxonomy.classes[i] for i, c in enumerate(counts) if c == 0]
        raise EmptyClass(f"training split has no clips for classes {missing}; weights undefined")
    return class_weights(counts)


def train(
    manifest: Manifest,
    train_clip_ids,
    taxonomy: Taxonomy,
    pipeline: PipelineConfig,
    cfg: TrainConfig,
    base_dir: str | None = None,
    resume: Checkpoint | None = None,
    sequences: list[SkelSequence] | None = None,
) -> Checkpoint:
    """Deterministic seeded training; returns the final checkpoint.

    `sequences` may pass pre-parsed clips (they must match train_clip_ids);
    otherwise clips are read from the manifest paths.
    """
    train_clip_ids = list(train_clip_ids)
    if not train_clip_ids:
        raise EmptySplit("training split is empty")
    if sequences is None:
        sequences = load_split_clips(manifest, train_clip_ids, base_dir)

    weights = training_class_weights([s.label for s in sequences], taxonomy)

    bundle = build_bundle(pipeline, taxonomy, cfg.seed)
    adam = AdamState()
    history: list[float] = []
    start_epoch = 0
    if resume is not None:
        if resume.taxonomy.K != taxonomy.K:
            raise ClassMismatch(f"checkpoint K={resume.taxonomy.K} != taxonomy K={taxonomy.K}")
        _load_tensors_into(bundle, resume.tensors)
        adam = resume.adam
        history = list(resume.loss_history)
        start_epoch = resume.epoch

    prepared = [prepare_clip(bundle, s, cfg.use_bio) for s in sequences]
    params = bundle.trainable_parameters()

    for epoch in range(start_epoch, cfg.epochs):
        order = rng_for("epoch-shuffle", cfg.seed, epoch).permutation(len(prepared))
        epoch_losses: list[float] = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [prepared[i] for i in order[lo : lo + cfg.batch_size]]
            for p in params:
                p.tensor.zero_grad()
            total = None
            for prep in batch:
                logits = clip_logits(bundle, prep, cfg.use_ted)
                loss = ag.weighted_ce(logits, prep.label_index, weights.w[prep.label_index])
                epoch_losses.append(loss.item())
                total = loss if total is None else ag.add(total, loss)
            mean_loss = ag.scale(total, 1.0 / len(batch))
            mean_loss.backward()
            grads = {
                p.name: (p.tensor.grad if p.tensor.grad is not None else np.zeros_like(p.data))
                for p in params
            }
            clip_global_norm(grads, cfg.grad_clip)
            adamw_step(params, grads, adam, cfg)
        history.append(float(np.mean(epoch_losses)))

    return Checkpoint(
        pipeline=pipeline,
        train_cfg=cfg,
        taxonomy=taxonomy,
        epoch=cfg.epochs,
        loss_history=history,
        seed=cfg.seed,
        stub_hash=bundle.backbone.snapshot_hash(),
        class_counts=tuple(weights.n),
        tensors=_bundle_tensors(bundle),
        adam=adam,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalEntry:
    clip_id: str
    true_label: str
    predicted: str
    probs: tuple[float, ...]


@dataclass(frozen=True)
class EvalReport:
    taxonomy: Taxonomy
    entries: tuple[EvalEntry, ...]

    def to_bytes(self) -> bytes:
        lines = []
        for e in self.entries:
            lines.append(
                json.dumps(
                    {
                        "clip_id": e.clip_id,
                        "true": e.true_label,
                        "predicted": e.predicted,
                        "probs": list(e.probs),
                    },
                    sort_keys=True,
                )
            )
        return ("\n".join(lines) + "\n").encode("utf-8")


def restore_bundle(ckpt: Checkpoint) -> ModelBundle:
    bundle = build_bundle(ckpt.pipeline, ckpt.taxonomy, ckpt.seed)
    _load_tensors_into(bundle, ckpt.tensors)
    if bundle.backbone.snapshot_hash() != ckpt.stub_hash:
        raise ClassMismatch("frozen backbone hash differs from the checkpoint snapshot")
    return bundle


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def evaluate(
    ckpt: Checkpoint,
    manifest: Manifest,
    test_clip_ids,
    base_dir: str | None = None,
    sequences: list[SkelSequence] | None = None,
) -> EvalReport:
    """Deterministic per-clip predictions under the checkpoint's ablation."""
    test_clip_ids = list(test_clip_ids)
    if not test_clip_ids:
        raise EmptySplit("test split is empty")
    if sequences is None:
        sequences = load_split_clips(manifest, test_clip_ids, base_dir)
    bundle = restore_bundle(ckpt)
    cfg = ckpt.train_cfg
    entries = []
    for seq in sequences:
        prep = prepare_clip(bundle, seq, cfg.use_bio)
        logits = clip_logits(bundle, prep, cfg.use_ted)
        probs = _softmax(logits.data)
        pred = ckpt.taxonomy.classes[int(np.argmax(probs))]
        entries.append(
            EvalEntry(
                clip_id=seq.clip_id,
                true_label=seq.label,
                predicted=pred,
                probs=tuple(float(p) for p in probs),
            )
        )
    return EvalReport(taxonomy=ckpt.taxonomy, entries=tuple(entries))


def load_eval_report(stream, taxonomy: Taxonomy) -> EvalReport:
    text = stream.read() if hasattr(stream, "read") else stream
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    entries = []
    for ln in text.split("\n"):
        if not ln.strip():
            continue
        obj = json.loads(ln)
        entries.append(
            EvalEntry(
                clip_id=obj["clip_id"],
                true_label=obj["true"],
                predicted=obj["predicted"],
                probs=tuple(obj["probs"]),
            )
        )
    return EvalReport(taxonomy=taxonomy, entries=tuple(entries))
