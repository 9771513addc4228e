"""Command-line entry points.

Subcommands: synth (build a synthetic corpus), train (stage 1 or 2),
embed (dump global embeddings), match (dense pair-score CSV), eval
(verification/identification report with figures).

Exit codes: 0 success, 2 usage/config error, 3 data/protocol error,
4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_manifest, render_fingerprint, save_image, synth_identity
from .encoder import encode
from .errors import (
    ConfigError,
    DataError,
    DegenerateEmbeddingError,
    FingermatchError,
    NumericError,
    ProtocolError,
    ShapeError,
    UsageError,
)
from .fusion import score_matrix
from .metrics import ScoreReport, ScoreSet, cmc, eer, genuine_impostor_split, roc, tar_at_far
from .msloss import SimilarityMatrix
from .reporting import fmt, report_lines, write_report
from .runconfig import load_run_config
from .trainer import evaluate, train_stage1, train_stage2


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _parse_size(raw: str) -> int:
    parts = raw.lower().split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise UsageError(f"--size must look like HxW, got {raw!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise UsageError(f"--size must look like HxW, got {raw!r}") from None
    if h != w:
        raise UsageError(f"only square images are supported, got {raw!r}")
    return h


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    if args.identities < 2:
        raise UsageError(f"--identities must be >= 2, got {args.identities}")
    if args.samples_per_modality < 1:
        raise UsageError(f"--samples-per-modality must be >= 1, got {args.samples_per_modality}")
    if args.test_identities < 0 or args.test_identities >= args.identities:
        raise UsageError("--test-identities must leave at least one training identity")
    size = _parse_size(args.size)
    out = Path(args.out)
    images_dir = out / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {images_dir}: {exc}") from None

    rows = []
    train_count = args.identities - args.test_identities
    for i in range(args.identities):
        identity = synth_identity(f"{args.seed}:{i}", size)
        subject = f"s{i:03d}"
        split = "train" if i < train_count else "test"
        for modality in ("CL", "CB"):
            for k in range(args.samples_per_modality):
                image = render_fingerprint(identity, modality, k, size)
                name = f"{subject}_f0_{modality}_{k:02d}.png"
                save_image(image, images_dir / name)
                rows.append(f"images/{name},{subject},f0,{modality},{split}")
    manifest = out / "manifest.csv"
    _atomic_write_text(manifest, "path,subject_id,finger_id,modality,split\n" + "\n".join(rows) + "\n")
    print(f"wrote {len(rows)} images and {manifest}")
    return 0


# ---------------------------------------------------------------------------
# train

def _overrides_from(args) -> dict:
    overrides: dict = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.stage is not None:
        overrides["stage"] = args.stage
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return overrides


def cmd_train(args) -> int:
    if args.stage is None:
        raise UsageError("--stage is required (1 or 2)")
    run = load_run_config(args.config, _overrides_from(args))
    cfg = run.train_config()
    dataset = Dataset.from_manifest(args.manifest, run.image_size)

    def progress(epoch, loss, lr):
        print(f"{epoch},{fmt(loss)},{fmt(lr)}")

    if args.stage == 1:
        if args.init is not None:
            raise UsageError("--init only applies to --stage 2")
        ckpt = train_stage1(cfg, dataset, progress)
    else:
        if args.init is None:
            raise UsageError("--stage 2 requires --init with a stage-1 checkpoint")
        base = load_checkpoint(args.init)
        ckpt = train_stage2(cfg, dataset, base, progress)
    save_checkpoint(ckpt, args.out)
    print(f"wrote checkpoint {args.out}")
    return 0


# ---------------------------------------------------------------------------
# embed

def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = Dataset.from_manifest(args.manifest, ckpt.encoder_config.image_size)
    params = ckpt.encoder_params(trainable=False)
    dim = ckpt.encoder_config.embed_dim
    header = "sample_path,subject_id,finger_id,modality," + ",".join(
        f"e_{i}" for i in range(dim)
    )
    lines = [header]
    for sample, image in zip(dataset.samples, dataset.images):
        _, emb = encode(image, params, ckpt.encoder_config)
        values = ",".join(fmt(v) for v in np.asarray(emb.data, dtype=np.float64))
        lines.append(f"{sample.raw_path},{sample.subject_id},{sample.finger_id},{sample.modality},{values}")
    _atomic_write_text(Path(args.out), "\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} embeddings to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# match

def _forward_all(dataset: Dataset, ckpt):
    params = ckpt.encoder_params(trainable=False)
    tokens, embs = [], []
    for image in dataset.images:
        t, e = encode(image, params, ckpt.encoder_config)
        tokens.append(t.data)
        embs.append(e.data)
    return tokens, np.stack(embs).astype(np.float64)


def cmd_match(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    stage = args.stage if args.stage is not None else ckpt.stage
    if not (0.0 <= args.fusion_weight <= 1.0):
        raise UsageError(f"--fusion-weight must lie in [0, 1], got {args.fusion_weight}")
    probe = Dataset.from_manifest(args.probe, ckpt.encoder_config.image_size)
    same_manifest = Path(args.probe).resolve() == Path(args.gallery).resolve()
    gallery = probe if same_manifest else Dataset.from_manifest(
        args.gallery, ckpt.encoder_config.image_size
    )
    if len(probe) == 0 or len(gallery) == 0:
        raise DataError(f"empty probe ({len(probe)}) or gallery ({len(gallery)}) manifest")

    probe_tokens, probe_embs = _forward_all(probe, ckpt)
    gal_tokens, gal_embs = (probe_tokens, probe_embs) if same_manifest else _forward_all(gallery, ckpt)
    scores = probe_embs @ gal_embs.T
    if stage == 2 and args.fusion_weight > 0.0:
        fus = ckpt.fusion_params(trainable=False)
        fine = score_matrix(probe_tokens, gal_tokens, fus, symmetric=same_manifest)
        scores = args.fusion_weight * fine + (1.0 - args.fusion_weight) * scores

    lines = ["probe_path,gallery_path,score"]
    for i, ps in enumerate(probe.samples):
        for j, gs in enumerate(gallery.samples):
            if args.drop_self and ps.image_path == gs.image_path:
                continue
            lines.append(f"{ps.raw_path},{gs.raw_path},{fmt(scores[i, j])}")
    _atomic_write_text(Path(args.out), "\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} scores to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _report_from_scores_csv(args) -> ScoreReport:
    identities = {}
    for s in load_manifest(args.manifest):
        identities[s.raw_path] = s.identity
        identities[str(s.image_path)] = s.identity

    probe_paths: list[str] = []
    gallery_seen: dict = {}
    entries: dict = {}
    with open(args.scores, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["probe_path", "gallery_path", "score"]:
            raise DataError(f"{args.scores}: bad header {header}, expected probe_path,gallery_path,score")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{args.scores}:{lineno}: expected 3 fields, got {len(row)}")
            p, g, raw = row
            try:
                value = float(raw)
            except ValueError:
                raise DataError(f"{args.scores}:{lineno}: bad score {raw!r}") from None
            if p not in identities:
                raise DataError(f"{args.scores}:{lineno}: probe {p!r} not in manifest")
            if g not in identities:
                raise DataError(f"{args.scores}:{lineno}: gallery {g!r} not in manifest")
            if p not in entries:
                probe_paths.append(p)
                entries[p] = {}
            gallery_seen.setdefault(g, None)
            entries[p][g] = value
    gallery_paths = list(gallery_seen)

    matrix = np.zeros((len(probe_paths), len(gallery_paths)))
    mask = np.zeros(matrix.shape, dtype=bool)
    for i, p in enumerate(probe_paths):
        for j, g in enumerate(gallery_paths):
            if g not in entries[p]:
                raise DataError(f"{args.scores}: incomplete matrix, missing pair ({p}, {g})")
            matrix[i, j] = entries[p][g]
            if p == g:
                mask[i, j] = True
    sim = SimilarityMatrix(
        matrix,
        [identities[p] for p in probe_paths],
        [identities[g] for g in gallery_paths],
        mask,
    )
    scores = genuine_impostor_split(sim)
    return ScoreReport(
        eer=eer(scores),
        tar_at_far={f: tar_at_far(scores, f) for f in args.far},
        roc=roc(scores),
        cmc=cmc(sim, args.max_rank),
        genuine_count=int(scores.genuine.size),
        impostor_count=int(scores.impostor.size),
        protocol="scores",
        stage=0,
        fusion_weight=0.0,
        score_set=scores,
    )


def cmd_eval(args) -> int:
    if args.scores is None and args.checkpoint is None:
        raise UsageError("eval needs either --scores or --checkpoint")
    if args.scores is not None and args.checkpoint is not None:
        raise UsageError("--scores and --checkpoint are mutually exclusive")
    if not args.far:
        args.far = [0.1, 0.01]
    if args.scores is not None:
        if args.manifest is None:
            raise UsageError("--scores requires --manifest to recover identity labels")
        report = _report_from_scores_csv(args)
    else:
        if args.protocol is None:
            raise UsageError("--checkpoint requires --protocol (cl2cb or cl2cl)")
        if args.manifest is None:
            raise UsageError("--checkpoint requires --manifest")
        ckpt = load_checkpoint(args.checkpoint)
        dataset = Dataset.from_manifest(args.manifest, ckpt.encoder_config.image_size)
        report = evaluate(
            ckpt,
            dataset,
            args.protocol,
            stage=args.stage,
            fusion_weight=args.fusion_weight,
            far_targets=tuple(args.far),
            max_rank=args.max_rank,
            split=args.split,
        )
    written = write_report(report, args.out, figures=not args.no_figures)
    for line in report_lines(report):
        print(line)
    print("# wrote: " + ", ".join(str(p) for p in written))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fingermatch",
        description="Two-stage transformer fingerprint matching toolkit",
    )
    parser.add_argument("--version", action="version", version=f"fingermatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired-modality corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--identities", type=int, required=True, help="number of identities (>= 2)")
    p.add_argument("--samples-per-modality", type=int, default=4)
    p.add_argument("--size", default="32x32", help="image size HxW (square)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-identities", type=int, default=0,
                   help="how many trailing identities get split=test")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train stage 1 (encoder) or stage 2 (fusion)")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--init", help="stage-1 checkpoint to initialize stage 2")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write global embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("match", help="write the dense probe x gallery score CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", required=True, help="probe manifest")
    p.add_argument("--gallery", required=True, help="gallery manifest")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--fusion-weight", type=float, default=1.0)
    p.add_argument("--drop-self", action="store_true",
                   help="omit probe==gallery sample pairs from the output")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="verification/identification report (+figures)")
    p.add_argument("--scores", help="score CSV from `match`")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--protocol", choices=("cl2cb", "cl2cl"))
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--fusion-weight", type=float, default=1.0)
    p.add_argument("--far", type=float, action="append",
                   help="FAR operating point (repeatable; default 0.1 and 0.01)")
    p.add_argument("--max-rank", type=int, default=10)
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.add_argument("--out", required=True, help="report output path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ProtocolError, ShapeError, DegenerateEmbeddingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except FingermatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
