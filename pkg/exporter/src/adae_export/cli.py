"""Exporter CLI: export writes an ADAE file + sidecar, verify checks one.

Exit codes: 0 ok, 1 bad invocation or model problem, 2 data problem
(unreadable corpus, failed verification).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .encoder import ExportError, ExportSpec, export
from .wire import WireError, check_structure, read_adae


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ExportError(message)


def cmd_export(args) -> int:
    spec = ExportSpec(model=args.model, revision=args.revision,
                      input_path=args.input, pooling=args.pooling,
                      out_path=args.out, batch_size=args.batch_size)
    sidecar = export(spec)
    print(json.dumps({"written": args.out, "n": sidecar["n"],
                      "d": sidecar["d"],
                      "label_arity": sidecar["label_arity"],
                      "skipped_rows": sidecar["skipped_rows"],
                      "revision": sidecar["revision"]},
                     indent=1, sort_keys=True))
    if sidecar["skipped_rows"]:
        print(f"warning: skipped {sidecar['skipped_rows']} malformed rows",
              file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    try:
        with open(args.path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    findings = list(check_structure(blob))
    if not findings:
        feats, _, arity = read_adae(args.path)
        for i in np.nonzero(~np.isfinite(feats).all(axis=1))[0]:
            findings.append({"row": int(i), "message": "non-finite feature"})
        sidecar_path = f"{args.path}.json"
        if os.path.exists(sidecar_path):
            try:
                sidecar = json.load(open(sidecar_path))
            except json.JSONDecodeError:
                findings.append({"message": f"{sidecar_path}: corrupt "
                                            f"sidecar"})
            else:
                declared = sidecar.get("label_arity")
                if declared != arity:
                    findings.append({
                        "message": f"sidecar label_arity {declared} != "
                                   f"file arity {arity}"})
    report = {"path": args.path, "findings": findings,
              "ok": not findings}
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0 if not findings else 2


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adae-export",
                     description="encode labeled text with a pinned "
                                 "transformer into ADAE files")
    sub = parser.add_subparsers(dest="command", required=True)

    p_exp = sub.add_parser("export")
    p_exp.add_argument("--model", required=True,
                       help="hub name or local model directory")
    p_exp.add_argument("--revision", required=True,
                       help="commit sha for hub models, weight sha256 for "
                            "local directories")
    p_exp.add_argument("--input", required=True,
                       help="CSV with text and label columns")
    p_exp.add_argument("--pooling", required=True, choices=("cls", "mean"))
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--batch-size", type=int, default=32)
    p_exp.set_defaults(func=cmd_export)

    p_ver = sub.add_parser("verify")
    p_ver.add_argument("--in", dest="path", required=True)
    p_ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except WireError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
