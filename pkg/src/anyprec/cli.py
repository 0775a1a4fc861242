"""Command-line front end.

Exit codes: 0 success, 1 validation failure, 2 usage error (argparse),
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time

import numpy as np

from . import apq, arch, engine, lab, weights_io
from .bitplane import BitplaneTensor, unpack_codes
from .errors import AnyPrecError
from .quantizer import SensitivityMap, build_any_precision, continue_upscale

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _parse_bits(text: str) -> list[int]:
    try:
        return [int(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bit list {text!r}") from None


def cmd_quantize(args) -> int:
    weights = weights_io.load_matrix(args.weights)
    sens = None
    if args.sens:
        sens = SensitivityMap(weights_io.load_matrix(args.sens))
    else:
        print("no sensitivity file given; assuming uniform importance", file=sys.stderr)
    layer = build_any_precision(
        weights, sens, args.nmin, args.nmax, threads=args.threads
    )
    apq.write_apq(args.out, layer, layout=args.layout)
    print(f"wrote {args.out} ({layer.out_channels}x{layer.in_features}, "
          f"{args.nmin}..{args.nmax} bits)")
    print("bits  total_weighted_sse")
    for k in layer.supported_bits():
        print(f"{k:4d}  {_fmt(layer.channel_sse[k].sum())}")
    return EXIT_OK


def cmd_upscale(args) -> int:
    layer, _ = apq.read_apq(args.apq)
    weights = weights_io.load_matrix(args.weights)
    sens = SensitivityMap(weights_io.load_matrix(args.sens)) if args.sens else None
    new_layer = continue_upscale(weights, sens, layer, args.nmax)
    apq.write_apq(args.out, new_layer, layout=args.layout)
    print(f"extended {args.apq}: {layer.n_max} -> {args.nmax} bits, wrote {args.out}")
    print("bits  total_weighted_sse")
    for k in new_layer.supported_bits():
        print(f"{k:4d}  {_fmt(new_layer.channel_sse[k].sum())}")
    return EXIT_OK


def _verify_layer(layer, tensor, rng) -> list[tuple[str, bool]]:
    checks = []
    full = unpack_codes(tensor, layer.n_max)
    checks.append(("codes reconstruct from planes", np.array_equal(full, layer.codes)))

    prefix_ok = all(
        np.array_equal(unpack_codes(tensor, k), layer.codes >> (layer.n_max - k))
        for k in layer.supported_bits()
    )
    checks.append(("prefix property across planes", prefix_ok))

    sorted_ok = all(
        bool(np.all(np.diff(layer.centroid_tables[k].astype(np.float64), axis=1) >= 0))
        for k in layer.supported_bits()
    )
    checks.append(("centroid tables sorted", sorted_ok))

    from .bitplane import LAYOUT_PERMUTED, inverse_permute_layout

    lin = inverse_permute_layout(tensor) if tensor.layout == LAYOUT_PERMUTED else tensor
    bits = np.unpackbits(lin.planes, axis=-1, bitorder="little")
    checks.append(("padded tail bits zero", not bits[:, :, layer.in_features :].any()))

    isolation_ok = True
    for k in sorted({layer.n_min, max(layer.n_min, layer.n_max - 1)}):
        want = unpack_codes(tensor, k)
        noisy = BitplaneTensor(
            tensor.planes.copy(), tensor.rows, tensor.cols, tensor.padded_cols, tensor.layout
        )
        noisy.planes[k:] = rng.integers(0, 256, size=noisy.planes[k:].shape, dtype=np.uint8)
        isolation_ok &= np.array_equal(unpack_codes(noisy, k), want)
    checks.append(("plane isolation spot check", bool(isolation_ok)))
    return checks


def cmd_verify(args) -> int:
    layer, tensor = apq.read_apq(args.apq)  # magic/size/crc checked here
    rng = np.random.default_rng(args.seed)
    checks = [("header and crc", True)]
    checks += _verify_layer(layer, tensor, rng)
    ok = True
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= passed
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_footprint(args) -> int:
    if args.arch:
        spec = arch.ArchSpec.from_json(args.arch)
    elif args.preset == "llama2-7b":
        spec = arch.LLAMA2_7B
    else:
        print("need --arch FILE or --preset llama2-7b", file=sys.stderr)
        return EXIT_USAGE
    for bits in args.bits:
        report = arch.footprint(spec, bits, args.passthrough_per_model)
        print(report.format())
    return EXIT_OK


def cmd_bench(args) -> int:
    layer, tensor = apq.read_apq(args.apq)
    prep = engine.prepare(layer, tensor)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal(layer.in_features)
    bits = args.bits or list(layer.supported_bits())

    writer = csv.writer(args.out_file)
    writer.writerow(
        ["bits", "repeats", "best_s", "mean_s", "planes_bytes", "table_bytes", "path"]
    )
    for k in bits:
        times = []
        report = engine.ExecutionReport()
        for r in range(args.repeats):
            rep = engine.ExecutionReport()
            t0 = time.perf_counter()
            engine.gemv(prep, x, engine.GemvConfig(bit_width=k), report=rep)
            times.append(time.perf_counter() - t0)
            report = rep
        writer.writerow(
            [k, args.repeats, _fmt(min(times)), _fmt(sum(times) / len(times)),
             report.planes_bytes_read, report.table_bytes_read, report.path_taken]
        )
    args.out_file.flush()
    return EXIT_OK


def cmd_lab(args) -> int:
    with open(args.config) as f:
        raw = json.load(f)
    if not raw:
        print("lab config must set at least one field", file=sys.stderr)
        return EXIT_USAGE
    cfg = lab.LabConfig.from_dict(raw)
    result = lab.run_gptq_clamp_experiment(cfg)
    trace = result["trace"]

    writer = csv.writer(args.out_file)
    writer.writerow(["column", "rmsd", "mean_clamp"])
    for i in range(len(trace.rmsd)):
        writer.writerow([i, _fmt(trace.rmsd[i]), _fmt(trace.mean_clamp[i])])
    args.out_file.flush()

    print(f"upscaled weighted error  {_fmt(result['upscaled_error'])}", file=sys.stderr)
    print(f"direct weighted error    {_fmt(result['direct_error'])}", file=sys.stderr)
    if args.awq:
        for row in lab.run_awq_reuse_experiment(cfg):
            print(
                f"awq bits={row['bits']}: reused {_fmt(row['reused_error'])} "
                f"direct {_fmt(row['direct_error'])}",
                file=sys.stderr,
            )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anyprec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a weight matrix into a .apq file")
    q.add_argument("weights", help="weight file (.npy or raw f32 + sidecar)")
    q.add_argument("--sens", help="sensitivity file, same shape as weights")
    q.add_argument("--nmin", type=int, default=3)
    q.add_argument("--nmax", type=int, default=8)
    q.add_argument("--threads", type=int, default=1)
    q.add_argument("--layout", choices=["linear", "permuted"], default="permuted")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    u = sub.add_parser("upscale", help="extend a .apq to a higher parent bit-width")
    u.add_argument("apq")
    u.add_argument("weights")
    u.add_argument("--sens")
    u.add_argument("--nmax", type=int, required=True)
    u.add_argument("--layout", choices=["linear", "permuted"], default="permuted")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_upscale)

    v = sub.add_parser("verify", help="check invariants of a .apq file")
    v.add_argument("apq")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    f = sub.add_parser("footprint", help="deployment size of bit-width sets")
    f.add_argument("--arch", help="architecture JSON file")
    f.add_argument("--preset", choices=["llama2-7b"])
    f.add_argument("--bits", type=_parse_bits, action="append", required=True,
                   help="comma-separated set, repeatable")
    f.add_argument("--passthrough-per-model", action="store_true")
    f.set_defaults(func=cmd_footprint)

    b = sub.add_parser("bench", help="time gemv per bit-width, report bytes read")
    b.add_argument("apq")
    b.add_argument("--bits", type=_parse_bits)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", dest="out_path")
    b.set_defaults(func=cmd_bench)

    l = sub.add_parser("lab", help="uniform-quantization upscaling experiments")
    l.add_argument("--config", required=True, help="JSON config file")
    l.add_argument("--awq", action="store_true", help="also run the reuse comparison")
    l.add_argument("--out", dest="out_path")
    l.set_defaults(func=cmd_lab)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out_path = getattr(args, "out_path", None)
    needs_stream = args.command in ("bench", "lab")
    try:
        if needs_stream:
            if out_path:
                with open(out_path, "w", newline="") as fh:
                    args.out_file = fh
                    return args.func(args)
            args.out_file = sys.stdout
        return args.func(args)
    except (AnyPrecError, ValueError, KeyError) as e:
        # AnyPrecError covers this package's validation failures; ValueError
        # and KeyError cover malformed JSON configs and arch files.
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
