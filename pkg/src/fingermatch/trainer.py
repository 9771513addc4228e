"""Two-stage optimization and the verification/identification evaluation path.

Stage 1 trains the encoder on the composite metric loss over global
embeddings. Stage 2 freezes the encoder (by default) and trains the
cross-attention fusion on the same composite loss applied to matrices of
fine-grained in-batch pair scores. AdamW with decoupled weight decay,
milestone learning-rate decay, and global-norm gradient clipping throughout.
All randomness is keyed by the config seed, so runs are byte-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, params_from_named
from .data import Dataset, make_batch
from .encoder import EncoderConfig, encode, init_encoder_params
from .errors import ConfigError, NumericError, ProtocolError, ShapeError
from .fusion import FusionConfig, init_fusion_params, match_score, score_matrix
from .metrics import ScoreReport, cmc, eer, genuine_impostor_split, roc, tar_at_far
from .msloss import LossConfig, SimilarityMatrix, composite_loss_graph, ms_loss_graph
from .tensorops import Tensor, stack_rows

PROTOCOLS = ("cl2cb", "cl2cl")


@dataclass
class TrainConfig:
    stage: int = 1
    base_lr: float = 3e-3
    lr_milestones: tuple = ()
    lr_decay_factor: float = 0.3
    epochs: int = 200
    ids_per_batch: int = 4
    samples_per_id: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    freeze_encoder: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")
        if not (0.0 < self.lr_decay_factor <= 1.0):
            raise ConfigError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        ms = tuple(self.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"lr_milestones must be strictly increasing, got {ms}")
        self.lr_milestones = ms


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: dict, cfg: TrainConfig) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float):
    """One decoupled-weight-decay Adam update over a named parameter dict.

    lr=0 is a legal null update: moments and the step counter still advance.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ShapeError(f"missing gradient for parameter {name}")
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """base_lr times decay_factor per milestone already reached."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    passed = sum(1 for ms in cfg.lr_milestones if ms <= epoch)
    return cfg.base_lr * cfg.lr_decay_factor ** passed


# ---------------------------------------------------------------------------
# shared loop plumbing

def _collect_grads(params: dict) -> dict:
    out = {}
    for name, t in params.items():
        out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
    return out


def _epoch_batches(dataset: Dataset, cfg: TrainConfig, epoch: int):
    return make_batch(dataset.samples, cfg.ids_per_batch, cfg.samples_per_id,
                      epoch_seed=(cfg.seed, epoch))


def _split_by_modality(batch, embeddings):
    cl, cl_labels, cb, cb_labels = [], [], [], []
    for emb, label, modality in zip(embeddings, batch.identity_labels, batch.modalities):
        if modality == "CL":
            cl.append(emb)
            cl_labels.append(label)
        else:
            cb.append(emb)
            cb_labels.append(label)
    return cl, cl_labels, cb, cb_labels


def _optimize(loss: Tensor, opt_params: dict, state: OptimizerState, lr: float,
              cfg: TrainConfig, epoch: int, batch_idx: int) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss in epoch {epoch}, batch {batch_idx}")
    loss.backward()
    grads = _collect_grads(opt_params)
    clip_global_norm(grads, cfg.grad_clip)
    adamw_step(opt_params, grads, state, lr)
    return value


# ---------------------------------------------------------------------------
# stage 1

def train_stage1(cfg: TrainConfig, dataset: Dataset, progress=None) -> Checkpoint:
    """Train the encoder on global embeddings; returns a stage-1 checkpoint."""
    train = dataset.split("train")
    params = init_encoder_params(cfg.encoder, cfg.seed, trainable=True)
    named = params.named_parameters()
    state = OptimizerState.for_params(named, cfg)
    trace = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        losses = []
        for batch_idx, batch in enumerate(_epoch_batches(train, cfg, epoch)):
            embeddings = [
                encode(train.images[i], params, cfg.encoder)[1] for i in batch.indices
            ]
            cl, cl_labels, cb, cb_labels = _split_by_modality(batch, embeddings)
            loss = composite_loss_graph(
                stack_rows(cl) if cl else None, cl_labels,
                stack_rows(cb) if cb else None, cb_labels,
                cfg.loss,
            )
            losses.append(_optimize(loss, named, state, lr, cfg, epoch, batch_idx))
        trace.append(float(np.mean(losses)) if losses else 0.0)
        if progress is not None:
            progress(epoch, trace[-1], lr)
    return Checkpoint(
        stage=1,
        encoder_config=cfg.encoder,
        loss_config=cfg.loss,
        seed=cfg.seed,
        epochs=cfg.epochs,
        loss_trace=trace,
        params=params_from_named(named, "encoder."),
    )


# ---------------------------------------------------------------------------
# stage 2

def _pair_score_matrix_graph(tokens_rows, tokens_cols, fusion_params, symmetric: bool):
    """Matrix Tensor of fine-grained pair scores; shares symmetric entries."""
    m, n = len(tokens_rows), len(tokens_cols)
    cells = [[None] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            if symmetric and i == j:
                cells[i][j] = Tensor(np.float32(1.0))  # masked self pair
            elif symmetric and j < i:
                cells[i][j] = cells[j][i]  # exact score symmetry
            else:
                cells[i][j] = match_score(tokens_rows[i], tokens_cols[j], fusion_params)
    return stack_rows([stack_rows(row) for row in cells])


def _stage2_batch_loss(cl_tokens, cl_labels, cb_tokens, cb_labels, fusion_params, loss_cfg):
    terms = []

    def add_term(rows, row_labels, cols, col_labels, symmetric):
        scores = _pair_score_matrix_graph(rows, cols, fusion_params, symmetric)
        mask = np.zeros(scores.data.shape, dtype=bool)
        if symmetric:
            np.fill_diagonal(mask, True)
        sim = SimilarityMatrix(scores.data, list(row_labels), list(col_labels), mask)
        terms.append(ms_loss_graph(scores, sim, loss_cfg))

    if cl_tokens:
        add_term(cl_tokens, cl_labels, cl_tokens, cl_labels, True)
    if cl_tokens and cb_tokens:
        add_term(cl_tokens, cl_labels, cb_tokens, cb_labels, False)
    if cb_tokens:
        add_term(cb_tokens, cb_labels, cb_tokens, cb_labels, True)
    from .tensorops import sum_scalars

    return sum_scalars(terms) if terms else Tensor(np.float64(0.0))


def train_stage2(cfg: TrainConfig, dataset: Dataset, stage1_checkpoint: Checkpoint,
                 progress=None) -> Checkpoint:
    """Train the fusion module on fine-grained in-batch pair scores.

    The encoder comes from the given checkpoint and stays frozen unless
    cfg.freeze_encoder is False. A stage-2 checkpoint resumes its fusion
    parameters; a stage-1 checkpoint starts them fresh.
    """
    if stage1_checkpoint.encoder_config != cfg.encoder:
        raise ConfigError(
            f"checkpoint encoder config {stage1_checkpoint.encoder_config} "
            f"does not match train config {cfg.encoder}"
        )
    train = dataset.split("train")
    enc_params = stage1_checkpoint.encoder_params(trainable=not cfg.freeze_encoder)
    if stage1_checkpoint.stage == 2:
        if stage1_checkpoint.fusion_config != cfg.fusion:
            raise ConfigError("checkpoint fusion config does not match train config")
        fus_params = stage1_checkpoint.fusion_params(trainable=True)
    else:
        fus_params = init_fusion_params(cfg.fusion, cfg.seed, trainable=True)

    enc_named = enc_params.named_parameters()
    fus_named = fus_params.named_parameters()
    opt_params = {f"fusion.{k}": t for k, t in fus_named.items()}
    if not cfg.freeze_encoder:
        opt_params.update({f"encoder.{k}": t for k, t in enc_named.items()})
    state = OptimizerState.for_params(opt_params, cfg)

    trace = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        losses = []
        for batch_idx, batch in enumerate(_epoch_batches(train, cfg, epoch)):
            token_sets = [
                encode(train.images[i], enc_params, cfg.encoder)[0] for i in batch.indices
            ]
            cl_t, cl_labels, cb_t, cb_labels = _split_by_modality(batch, token_sets)
            loss = _stage2_batch_loss(cl_t, cl_labels, cb_t, cb_labels, fus_params, cfg.loss)
            losses.append(_optimize(loss, opt_params, state, lr, cfg, epoch, batch_idx))
        trace.append(float(np.mean(losses)) if losses else 0.0)
        if progress is not None:
            progress(epoch, trace[-1], lr)

    params = params_from_named(enc_named, "encoder.")
    params.update(params_from_named(fus_named, "fusion."))
    return Checkpoint(
        stage=2,
        encoder_config=cfg.encoder,
        loss_config=cfg.loss,
        seed=cfg.seed,
        epochs=cfg.epochs,
        fusion_config=cfg.fusion,
        loss_trace=trace,
        params=params,
    )


# ---------------------------------------------------------------------------
# evaluation

def evaluate(ckpt: Checkpoint, dataset: Dataset, protocol: str, stage: int | None = None,
             fusion_weight: float = 1.0, far_targets: tuple = (0.1, 0.01),
             max_rank: int = 10, split: str = "test") -> ScoreReport:
    """Score a probe/gallery protocol and summarize verification metrics.

    cl2cb: CL probes against a CB gallery. cl2cl: CL against CL with self
    pairs masked. Stage 1 scores are embedding cosines; stage 2 scores blend
    the fine-grained pair score with the cosine via `fusion_weight`.
    """
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}, expected one of {PROTOCOLS}")
    if stage is None:
        stage = ckpt.stage
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    data = dataset.split(split)
    probes = data.by_modality("CL")
    gallery = probes if protocol == "cl2cl" else data.by_modality("CB")
    if len(probes) == 0 or len(gallery) == 0:
        raise ProtocolError(
            f"protocol {protocol} needs both sides populated, got "
            f"{len(probes)} probes / {len(gallery)} gallery samples in split {split!r}"
        )

    enc_params = ckpt.encoder_params(trainable=False)
    need_tokens = stage == 2 and fusion_weight > 0.0

    def forward(ds: Dataset):
        tokens, embs = [], []
        for img in ds.images:
            t, e = encode(img, enc_params, ckpt.encoder_config)
            tokens.append(t.data)
            embs.append(e.data)
        return tokens, np.stack(embs).astype(np.float64)

    probe_tokens, probe_embs = forward(probes)
    if protocol == "cl2cl":
        gal_tokens, gal_embs = probe_tokens, probe_embs
    else:
        gal_tokens, gal_embs = forward(gallery)

    scores = probe_embs @ gal_embs.T
    if stage == 2:
        if need_tokens:
            fus_params = ckpt.fusion_params(trainable=False)
            fine = score_matrix(probe_tokens, gal_tokens, fus_params,
                                symmetric=protocol == "cl2cl")
            scores = fusion_weight * fine + (1.0 - fusion_weight) * scores
        # fusion_weight == 0 degenerates to the stage-1 cosine matrix

    mask = np.zeros(scores.shape, dtype=bool)
    if protocol == "cl2cl":
        np.fill_diagonal(mask, True)
    sim = SimilarityMatrix(
        scores,
        [s.identity for s in probes.samples],
        [s.identity for s in gallery.samples],
        mask,
    )
    score_set = genuine_impostor_split(sim)
    return ScoreReport(
        eer=eer(score_set),
        tar_at_far={f: tar_at_far(score_set, f) for f in far_targets},
        roc=roc(score_set),
        cmc=cmc(sim, max_rank),
        genuine_count=int(score_set.genuine.size),
        impostor_count=int(score_set.impostor.size),
        protocol=protocol,
        stage=stage,
        fusion_weight=fusion_weight,
        score_set=score_set,
    )
