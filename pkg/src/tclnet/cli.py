"""``tclnet`` command line.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 model incompatibility.
Progress goes to stderr; results go to stdout or files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from tclnet.config import RunConfig, parse_config, write_resolved
from tclnet.errors import (
    ContractViolationError,
    DecodeError,
    FormatError,
    IncompatibleModelError,
    InvalidParameterError,
    ProtocolError,
    ProviderUnavailableError,
)

log = logging.getLogger("tclnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Workspace:
    """Resolved paths for one config; relative paths are taken from the config's directory."""

    def __init__(self, cfg: RunConfig, base: Path):
        self.cfg = cfg
        self.dataset = base / cfg.paths.dataset
        self.ckpt = base / cfg.paths.checkpoints
        self.out = base / cfg.paths.out

    def record(self, name: str, digest: str) -> None:
        path = self.ckpt / MANIFEST
        doc = json.loads(path.read_text()) if path.exists() else {}
        doc[name] = digest
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def verified(self, name: str, file: str) -> str:
        """Hash of a checkpoint file, checked against the recorded value."""
        path = self.ckpt / file
        if not path.exists():
            raise FormatError(f"missing checkpoint {path}; run the matching train/fit step first")
        actual = _sha256(path)
        manifest = self.ckpt / MANIFEST
        recorded = json.loads(manifest.read_text()).get(name) if manifest.exists() else None
        if recorded is not None and recorded != actual:
            raise IncompatibleModelError(f"{name} checkpoint hash mismatch: recorded {recorded}, found {actual}")
        return actual


def _load_samples(ws: Workspace):
    from tclnet.csi import load_dataset

    if not ws.dataset.exists():
        raise FormatError(f"dataset {ws.dataset} not found; run gen-data first")
    return load_dataset(ws.dataset)


def _lossy_config(cfg: RunConfig):
    from tclnet.lossy import LossyModelConfig

    d, l = cfg.data, cfg.lossy
    return LossyModelConfig(n_a=d.n_a, n_t=d.n_t, cr_num=l.cr_num, cr_den=l.cr_den, r=l.r, window=l.window, heads=l.heads)


def _latent_corpus(ws: Workspace, samples, model) -> list[bytes]:
    from tclnet.codec.quantize import quantize
    from tclnet.lossy import encode
    from tclnet.probmodels.base import ascii_tokenize

    return [ascii_tokenize(quantize(encode(s, model), ws.cfg.codec.n_bits)) for s in samples]


def _load_lossy(ws: Workspace):
    from tclnet.lossy import load_model

    digest = ws.verified("lossy", "lossy.tclw")
    model, _ = load_model(ws.ckpt)
    return model, digest


def build_codec(ws: Workspace, c: float | None = None):
    from tclnet.pipeline import TclNetCodec
    from tclnet.probmodels.base import Alphabet, FactorizedModel
    from tclnet.probmodels.llm import LlmProvider
    from tclnet.probmodels.lm import LmProvider, load_lm

    cfg = ws.cfg
    alphabet = Alphabet(cfg.codec.n_bits)
    model, lossy_id = _load_lossy(ws)
    ids = {"lossy": lossy_id}
    ids["fm"] = ws.verified("fm", "fm.json")
    fm = FactorizedModel.from_dict(json.loads((ws.ckpt / "fm.json").read_text()))
    if fm.alphabet != alphabet:
        raise IncompatibleModelError(f"fm.json is for {fm.alphabet.n_bits}-bit symbols, config uses {alphabet.n_bits}")
    provider = cfg.codec.provider
    if provider == "lm":
        ids["lm"] = ws.verified("lm", "lm.tclw")
        lm, _ = load_lm(ws.ckpt)
        context = LmProvider(lm, alphabet)
    elif provider == "llm":
        context = LlmProvider(alphabet, url=cfg.codec.llm_url)
    else:
        context = fm
    _, meta = _load_samples(ws)
    codec = TclNetCodec(model, fm, context, meta, cfg.codec.n_bits, cfg.codec.c if c is None else c, ids)
    return codec


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(ws: Workspace, args) -> int:
    from tclnet.csi import make_dataset, save_dataset

    d = ws.cfg.data
    samples, meta = make_dataset(d.samples, d.n_c, d.n_t, d.n_a, d.num_paths, d.max_delay_taps, d.seed, d.snr_db)
    ws.dataset.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ws.dataset, samples, meta)
    log.info("wrote %d samples to %s", d.samples, ws.dataset)
    print(f"dataset: {ws.dataset} samples={d.samples} lo={meta.lo:.6g} hi={meta.hi:.6g}")
    return EXIT_OK


def cmd_train_lossy(ws: Workspace, args) -> int:
    from tclnet.lossy import reconstruct, save_model, train_lossy
    from tclnet.pipeline import nmse, svd_baseline

    samples, meta = _load_samples(ws)
    x = np.stack([s.data for s in samples])
    lc = ws.cfg.lossy
    cfg = _lossy_config(ws.cfg)
    res = train_lossy(x, cfg, epochs=lc.epochs, warmup=lc.warmup, seed=ws.cfg.data.seed, lr_max=lc.lr, batch_size=lc.batch)
    digest = save_model(ws.ckpt, res.model)
    ws.record("lossy", digest)
    # NMSE is measured after denormalisation, i.e. around the zero level
    zero = -meta.lo / (meta.hi - meta.lo)
    flat = (x - zero).reshape(len(x), -1)
    value = nmse(flat, (reconstruct(res.model, x) - zero).reshape(len(x), -1))
    print(f"lossy checkpoint sha256={digest}")
    print(f"train nmse_db={value:.4f} svd_baseline_db={svd_baseline(samples, cfg.latent_len):.4f}")
    return EXIT_OK


def cmd_fit_fm(ws: Workspace, args) -> int:
    from tclnet.codec.entropy import factorized_entropy
    from tclnet.probmodels.base import Alphabet, fit_fm

    samples, _ = _load_samples(ws)
    model, _ = _load_lossy(ws)
    fm = fit_fm(_latent_corpus(ws, samples, model), Alphabet(ws.cfg.codec.n_bits))
    path = ws.ckpt / "fm.json"
    path.write_text(json.dumps(fm.to_dict()))
    digest = _sha256(path)
    ws.record("fm", digest)
    print(f"fm sha256={digest} entropy_bits={factorized_entropy(fm):.4f}")
    return EXIT_OK


def cmd_train_lm(ws: Workspace, args) -> int:
    from tclnet.probmodels.lm import LmConfig, cross_entropy_bits, save_lm, train_lm

    samples, _ = _load_samples(ws)
    model, _ = _load_lossy(ws)
    corpus = _latent_corpus(ws, samples, model)
    l = ws.cfg.lm
    cfg = LmConfig(embed=l.embed, blocks=l.blocks, heads=l.heads, ffn=l.ffn, max_len=max(len(corpus[0]), 1))
    res = train_lm(corpus, cfg, iters=l.iters, batch=l.batch, lr=l.lr, seed=l.seed)
    digest = save_lm(ws.ckpt, res.model)
    ws.record("lm", digest)
    print(f"lm sha256={digest} final_loss_bits={res.losses[-1]:.4f} train_ce_bits={cross_entropy_bits(res.model, corpus):.4f}")
    return EXIT_OK


def cmd_compress(ws: Workspace, args) -> int:
    from tclnet.codec.payload import encode_payload
    from tclnet.csi import load_dataset
    from tclnet.pipeline import compress_tensor

    codec = build_codec(ws)
    samples, _ = load_dataset(args.input)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    stream_bits = 0
    for i, x in enumerate(samples):
        payload, _ = compress_tensor(x, codec)
        (out / f"{i:06d}.tclp").write_bytes(encode_payload(payload))
        stream_bits += payload.stream_bits
    doc = {"count": len(samples), "n_bits": codec.n_bits, "c": codec.c, "provider": ws.cfg.codec.provider, "model_ids": codec.model_ids}
    (out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    n = 2 * codec.model.cfg.n_a * codec.model.cfg.n_t
    print(f"compressed {len(samples)} samples to {out} bit_rate={stream_bits / max(len(samples), 1) / n:.6g}")
    return EXIT_OK


def cmd_decompress(ws: Workspace, args) -> int:
    from tclnet.codec.payload import decode_payload
    from tclnet.csi import RealCsiTensor, save_dataset
    from tclnet.pipeline import decompress_tensor

    src = Path(args.input)
    manifest = src / MANIFEST
    if not manifest.exists():
        raise FormatError(f"{src} has no {MANIFEST}")
    doc = json.loads(manifest.read_text())
    codec = build_codec(ws, c=doc.get("c"))
    codec.check_ids(doc.get("model_ids", {}))
    out = []
    for i in range(int(doc["count"])):
        payload = decode_payload((src / f"{i:06d}.tclp").read_bytes())
        out.append(RealCsiTensor(np.clip(decompress_tensor(payload, codec), 0.0, 1.0), codec.meta))
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(args.output, out, codec.meta)
    print(f"decompressed {len(out)} samples to {args.output}")
    return EXIT_OK


def cmd_eval(ws: Workspace, args) -> int:
    from tclnet.csi import denormalize, load_dataset
    from tclnet.pipeline import nmse

    truth, _ = _load_samples(ws)
    recon, _ = load_dataset(args.recon)
    if len(recon) != len(truth):
        raise FormatError(f"{args.recon} has {len(recon)} samples, dataset has {len(truth)}")
    value = nmse([denormalize(t) for t in truth], [denormalize(r) for r in recon])
    print(f"nmse_db={value:.4f}")
    return EXIT_OK


def cmd_sweep_rdc(ws: Workspace, args) -> int:
    from tclnet.pipeline import rdc_csv, rdc_sweep

    codec = build_codec(ws)
    samples, _ = _load_samples(ws)
    if args.samples:
        samples = samples[: args.samples]
    points = rdc_sweep(codec, args.c_values, samples, runs=args.runs)
    text = rdc_csv(points)
    ws.out.mkdir(parents=True, exist_ok=True)
    (ws.out / "rdc.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_grad_check(ws: Workspace | None, args) -> int:
    from tclnet.gradcheck import format_table, run_grad_checks

    rows = run_grad_checks(seed=args.seed, full_coords=args.full_coords, only=args.only)
    if not rows:
        raise InvalidParameterError(f"no grad checks named {args.only}")
    print(format_table(rows))
    return EXIT_OK if all(r.ok for r in rows) else EXIT_DATA


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-lossy": cmd_train_lossy,
    "train-lm": cmd_train_lm,
    "fit-fm": cmd_fit_fm,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "eval": cmd_eval,
    "sweep-rdc": cmd_sweep_rdc,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tclnet", description="CSI feedback compression with hybrid LM/FM entropy coding")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "grad-check", help="run configuration JSON")
        if name in ("compress", "decompress"):
            p.add_argument("input")
            p.add_argument("output")
        if name == "eval":
            p.add_argument("--recon", required=True, help="reconstructed dataset written by decompress")
        if name == "sweep-rdc":
            p.add_argument("--c-values", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
            p.add_argument("--samples", type=int, default=0, help="limit the number of samples (0 = all)")
            p.add_argument("--runs", type=int, default=5, help="timed decode runs per c")
        if name == "grad-check":
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--full-coords", type=int, default=4, help="sampled coordinates per tensor of the full model")
            p.add_argument("--only", nargs="+", help="run only these checks")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        ws = None
        if args.config:
            cfg = parse_config(args.config)
            ws = Workspace(cfg, Path(args.config).resolve().parent)
            echo = write_resolved(cfg, ws.out)
            (ws.out / "seed.txt").write_text(f"{cfg.data.seed}\n")
            log.info("resolved config written to %s", echo)
        return COMMANDS[args.command](ws, args)
    except InvalidParameterError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IncompatibleModelError as exc:
        print(f"incompatible model: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (FormatError, DecodeError, ProtocolError, ProviderUnavailableError, ContractViolationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
