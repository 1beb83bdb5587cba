"""Command line for exporting D2PF feature files.

Exit codes: 0 clean export, 1 usage error, 2 data problem (including a
partial export with skipped sentences; the skip log names each one).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from .encoders import PRETRAINED_VIT_B32, CLIPImageEncoder
from .export import (ExportJob, ExportResult, GenerationSettings,
                     export_authentic, export_reconstructed)
from .generator import (CLIPTextConditioner, HashTextConditioner,
                        LatentImageGenerator)


def _build_encoder(args) -> CLIPImageEncoder:
    if args.clip == "tiny":
        return CLIPImageEncoder(tiny_seed=args.clip_seed, pooled=args.pooled)
    return CLIPImageEncoder(model_name=args.clip, pooled=args.pooled)


def _finish(job: ExportJob, result: ExportResult) -> int:
    log = Path(str(job.output) + ".skipped")
    if result.skipped:
        log.write_text("\n".join(f"{sid}\t{reason}"
                                 for sid, reason in result.skipped) + "\n",
                       encoding="utf-8")
        print(f"wrote {result.written} records to {job.output}; "
              f"skipped {len(result.skipped)} (see {log})", file=sys.stderr)
        return 2
    if log.exists():
        log.unlink()
    print(f"wrote {result.written} records to {job.output}")
    return 0


def cmd_authentic(args) -> int:
    job = ExportJob(corpus=Path(args.corpus), output=Path(args.output),
                    image_dir=Path(args.images), pooled=args.pooled)
    result = export_authentic(job, _build_encoder(args))
    return _finish(job, result)


def cmd_reconstructed(args) -> int:
    settings = GenerationSettings(steps=args.steps, guidance=args.guidance,
                                  seed=args.seed, batch_size=args.batch_size)
    job = ExportJob(corpus=Path(args.corpus), output=Path(args.output),
                    settings=settings, pooled=args.pooled)
    if args.text_encoder == "hash":
        conditioner = HashTextConditioner()
    else:
        conditioner = CLIPTextConditioner(args.text_encoder)
    generator = LatentImageGenerator(conditioner=conditioner,
                                     image_size=args.image_size,
                                     steps=settings.steps,
                                     guidance=settings.guidance,
                                     seed=settings.seed,
                                     weights=args.generator_weights)
    result = export_reconstructed(job, _build_encoder(args), generator)
    return _finish(job, result)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="d2pf-export",
                     description="Export CLIP features to D2PF containers")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--corpus", required=True,
                       help="UTF-8 text, one sentence per line")
        p.add_argument("--output", required=True, help="D2PF file to write")
        p.add_argument("--clip", default=PRETRAINED_VIT_B32,
                       help="pretrained CLIP name, or 'tiny' for a seeded "
                            "local config")
        p.add_argument("--clip-seed", type=int, default=47,
                       help="weight seed used with --clip tiny")
        p.add_argument("--pooled", action="store_true",
                       help="export the single projected image embedding")

    p = sub.add_parser("authentic", help="encode dataset images")
    shared(p)
    p.add_argument("--images", required=True,
                   help="directory of <sentence_id>.png/.jpg files")
    p.set_defaults(fn=cmd_authentic)

    p = sub.add_parser("reconstructed",
                       help="generate images from text, then encode them")
    shared(p)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--seed", type=int, default=47)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--text-encoder", default="hash",
                   help="'hash' for the offline conditioner or a pretrained "
                        "CLIP text model name")
    p.add_argument("--generator-weights",
                   help="optional state-dict path for the latent sampler")
    p.set_defaults(fn=cmd_reconstructed)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
