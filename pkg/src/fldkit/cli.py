"""Command-line surface: encode, search, eval, verify, train.

Every command resolves one configuration (defaults, then a JSON config
file, then dotted-key --set overrides, then --seed), logs it next to its
outputs, and is deterministic given that resolved configuration: rerun
it and every numeric artifact is byte-identical.  Record-level work runs
on a bounded thread pool (FLDKIT_WORKERS, default 1); all writes happen
in record order on the main thread.

Exit codes: 0 success, 2 configuration errors, 3 I/O errors, 4 contract,
dimension or parse errors, 5 verification failures.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .datasets import crop_and_resize, parse_manifest, parse_pts, write_pts
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    FldkitError,
    ParseError,
)
from .heatmaps import (
    Heatmap,
    LandmarkSet,
    decode_argmax,
    encode_ground_truth,
    load_boundary_scheme,
)
from .losses import SearchConfig, search_decode
from .metrics import EvalReport, nme
from .network import NetworkConfig, build
from .training import (
    TrainSettings,
    TrainingSet,
    alternate_optimize,
    evaluate,
    load_checkpoint,
    make_synthetic_dataset,
    prepare_sample,
    save_checkpoint,
)
from .verify import run_suites

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CONTRACT = 4
EXIT_VERIFY = 5

DEFAULT_CONFIG = {
    "seed": 0,
    "sigma1": 3.0,
    "sigma2": 3.0,
    "sigma3": 4.0,
    "eta": 10.0,
    "window": 7,
    "xi": 0.01,
    "heatmap_size": 32,
    "network": {
        "input_size": 64,
        "base_channels": 32,
        "hourglass_depth": 2,
        "stacks": 1,
        "landmark_count": 5,
        "boundary_count": 13,
    },
    "train": {
        "iterations": 500,
        "batch_size": 4,
        "schedule_iterations": 100000,
        "samples": 200,
        "test_samples": 40,
        "source": "synthetic",
        "manifest": None,
        "eval_every": 100,
    },
    "verify": {
        "newton_schulz": {"iterations": 5},
        "js": {"pairs": 1000},
        "search": {"trials": 500},
    },
}


def resolve_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {args.config}: {exc}") from exc
        _deep_update(config, loaded)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        _set_dotted(config, key.strip(), _parse_value(value.strip()))
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def _deep_update(base: dict, extra: dict) -> None:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def _set_dotted(config: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = config
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def _parse_value(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("null", "none"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def search_config_from(config: dict) -> SearchConfig:
    return SearchConfig(window=int(config["window"]), sigma3=float(config["sigma3"]),
                        eta=float(config["eta"]))


def network_config_from(config: dict) -> NetworkConfig:
    return NetworkConfig(**config["network"])


def _workers() -> int:
    return max(1, int(os.environ.get("FLDKIT_WORKERS", "1")))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log_resolved(config: dict, out: Path, command: str) -> None:
    payload = dict(config)
    payload["command"] = command
    (out / "resolved_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_heatmap_png(values: np.ndarray, path: Path) -> None:
    from PIL import Image

    gray = np.clip(values, 0.0, 1.0)
    Image.fromarray((gray * 255).round().astype(np.uint8), mode="L").save(path)


# -- encode ------------------------------------------------------------------------


def cmd_encode(args, config: dict) -> int:
    out = _out_dir(args)
    _log_resolved(config, out, "encode")
    scheme = load_boundary_scheme(args.scheme)
    records = parse_manifest(Path(args.manifest).read_text(), Path(args.manifest).parent)
    if not records:
        print("warning: empty manifest, nothing to encode", file=sys.stderr)
        return EXIT_OK
    size = int(config["heatmap_size"])

    def encode_record(record):
        _, transform = crop_and_resize(
            np.zeros((max(2, int(record.bbox[1] + record.bbox[3])),
                      max(2, int(record.bbox[0] + record.bbox[2])))),
            record.bbox, target=size)
        mapped = LandmarkSet(points=transform.apply(record.landmarks.points),
                             scheme=record.landmarks.scheme)
        return encode_ground_truth(
            mapped, scheme, (size, size),
            sigma1=float(config["sigma1"]), sigma2=float(config["sigma2"]),
            xi=float(config["xi"]))

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        encoded = list(pool.map(encode_record, records))
    for record, (landmark_maps, boundary_maps) in zip(records, encoded):
        stem = record.record_id
        for i, hm in enumerate(landmark_maps):
            np.save(out / f"{stem}_landmark_{i:02d}.npy", hm.values.data)
            save_heatmap_png(hm.values.data, out / f"{stem}_landmark_{i:02d}.png")
        for t, hm in enumerate(boundary_maps):
            np.save(out / f"{stem}_boundary_{t:02d}.npy", hm.values.data)
            save_heatmap_png(hm.values.data, out / f"{stem}_boundary_{t:02d}.png")
    print(f"encoded {len(records)} records into {out}")
    return EXIT_OK


# -- search ------------------------------------------------------------------------


def cmd_search(args, config: dict) -> int:
    out = _out_dir(args)
    _log_resolved(config, out, "search")
    scheme = load_boundary_scheme(args.scheme)
    heatmap_dir = Path(args.heatmaps)
    stems = sorted({p.name.rsplit("_landmark_", 1)[0]
                    for p in heatmap_dir.glob("*_landmark_00.npy")})
    if not stems:
        raise ContractError(f"no landmark heatmaps found under {heatmap_dir}")
    search = search_config_from(config)
    size = int(config["heatmap_size"])
    gt_records = {}
    if args.gt_manifest:
        for record in parse_manifest(Path(args.gt_manifest).read_text(),
                                     Path(args.gt_manifest).parent):
            gt_records[record.record_id] = record

    def process(stem):
        plain_points, searched_points = [], []
        for idx in range(scheme.point_count):
            lm_path = heatmap_dir / f"{stem}_landmark_{idx:02d}.npy"
            if not lm_path.exists():
                raise ContractError(f"missing landmark channel {idx} for record {stem}")
            t = scheme.landmark_to_boundary[idx]
            bd_path = heatmap_dir / f"{stem}_boundary_{t:02d}.npy"
            if not bd_path.exists():
                raise ContractError(
                    f"missing boundary channel {t} for landmark {idx} of record {stem}")
            lm = Heatmap(values=np.load(lm_path), kind="landmark")
            bd = Heatmap(values=np.load(bd_path), kind="boundary")
            plain_points.append(decode_argmax(lm))
            searched_points.append(search_decode(lm, bd, scheme, idx, t, search))
        return (np.asarray(plain_points, dtype=np.float64),
                np.asarray(searched_points, dtype=np.float64))

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        decoded = list(pool.map(process, stems))

    delta_lines = ["record\tmean_shift_px\targmax_err\tsearched_err"]
    for stem, (plain, searched) in zip(stems, decoded):
        scheme_name = f"syn{scheme.point_count}" if scheme.name.startswith("SYN") else scheme.name
        if stem in gt_records:
            # decoded in heatmap pixels; report in the manifest's frame
            bbox = gt_records[stem].bbox
            _, transform = crop_and_resize(
                np.zeros((max(2, int(bbox[1] + bbox[3])), max(2, int(bbox[0] + bbox[2])))),
                bbox, target=size)
            plain = transform.invert(plain)
            searched = transform.invert(searched)
        (out / f"{stem}_argmax.pts").write_text(
            write_pts(LandmarkSet(points=plain, scheme=scheme_name)))
        (out / f"{stem}_searched.pts").write_text(
            write_pts(LandmarkSet(points=searched, scheme=scheme_name)))
        shift = float(np.linalg.norm(searched - plain, axis=1).mean())
        if stem in gt_records:
            gt = gt_records[stem].landmarks.points
            err_a = float(np.linalg.norm(plain - gt, axis=1).mean())
            err_s = float(np.linalg.norm(searched - gt, axis=1).mean())
            delta_lines.append(f"{stem}\t{shift:.17g}\t{err_a:.17g}\t{err_s:.17g}")
        else:
            delta_lines.append(f"{stem}\t{shift:.17g}\t-\t-")
    (out / "deltas.tsv").write_text("\n".join(delta_lines) + "\n")
    print(f"decoded {len(stems)} records into {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------


def cmd_eval(args, config: dict) -> int:
    out = _out_dir(args)
    _log_resolved(config, out, "eval")
    gt_records = {r.record_id: r
                  for r in parse_manifest(Path(args.gt_manifest).read_text(),
                                          Path(args.gt_manifest).parent)}
    pred_dir = Path(args.predictions)
    suffix = f"_{args.decoder}.pts" if args.decoder else ".pts"
    pred_files = {}
    for path in sorted(pred_dir.glob(f"*{suffix}")):
        stem = path.name[: -len(suffix)]
        pred_files[stem] = path
    if set(pred_files) != set(gt_records):
        missing = sorted(set(gt_records) ^ set(pred_files))
        raise ContractError(f"prediction/ground-truth records do not align: {missing[:5]}")
    per_image, ids = [], []
    scheme = load_boundary_scheme(args.scheme) if args.scheme else None
    for stem in sorted(gt_records):
        record = gt_records[stem]
        pred = parse_pts(pred_files[stem].read_text(), scheme=record.landmarks.scheme)
        per_image.append(nme(pred, record.landmarks, args.normalization,
                             scheme=scheme, bbox=record.bbox))
        ids.append(stem)
    report = EvalReport.build(per_image, normalization=args.normalization, record_ids=ids)
    (out / "report.txt").write_text(report.to_text())
    (out / "ced.tsv").write_text(report.ced_table())
    print(f"mean_nme {report.mean_nme:.17g} failure_rate {report.failure_rate:.17g}")
    return EXIT_OK


# -- verify ------------------------------------------------------------------------


def cmd_verify(args, config: dict) -> int:
    if args.out:
        out = _out_dir(args)
        _log_resolved(config, out, "verify")
    results = run_suites(args.suites, overrides=config.get("verify", {}))
    failed = 0
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += 0 if r.passed else 1
        lines.append(json.dumps({
            "status": status, "suite": r.suite, "check": r.name,
            "measured": r.measured, "tolerance": r.tolerance}, sort_keys=True))
        print(lines[-1])
    if args.out:
        (Path(args.out) / "verify.jsonl").write_text("\n".join(lines) + "\n")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


# -- train -------------------------------------------------------------------------


def _manifest_dataset(manifest_path: str, config: dict, net_config: NetworkConfig,
                      settings: TrainSettings) -> TrainingSet:
    from PIL import Image

    from .datasets import Sample

    records = parse_manifest(Path(manifest_path).read_text(), Path(manifest_path).parent)
    if not records:
        raise ContractError(f"manifest {manifest_path} holds no records")
    scheme = load_boundary_scheme(records[0].landmarks.scheme.lower())
    samples = []
    for record in records:
        image = np.asarray(Image.open(record.image_path).convert("RGB"), dtype=np.float64) / 255.0
        cropped, transform = crop_and_resize(image, record.bbox, target=net_config.input_size)
        samples.append(prepare_sample(
            Sample(image=cropped,
                   landmarks=LandmarkSet(points=transform.apply(record.landmarks.points),
                                         scheme=record.landmarks.scheme),
                   bbox=(0.0, 0.0, float(net_config.input_size), float(net_config.input_size))),
            scheme, net_config, settings))
    return TrainingSet(samples=samples, scheme=scheme)


def cmd_train(args, config: dict) -> int:
    out = _out_dir(args)
    _log_resolved(config, out, "train")
    net_config = network_config_from(config)
    train_cfg = config["train"]
    settings = TrainSettings(
        iterations=int(train_cfg["iterations"]),
        batch_size=int(train_cfg["batch_size"]),
        schedule_iterations=int(train_cfg["schedule_iterations"]),
        sigma1=float(config["sigma1"]), sigma2=float(config["sigma2"]),
        xi=float(config["xi"]), search=search_config_from(config))
    seed = int(config["seed"])
    if train_cfg["source"] == "synthetic":
        dataset = make_synthetic_dataset(int(train_cfg["samples"]), net_config, settings, seed=seed)
        test_set = make_synthetic_dataset(int(train_cfg["test_samples"]), net_config, settings,
                                          seed=seed + 1_000_000)
    elif train_cfg["source"] == "manifest":
        if not train_cfg.get("manifest"):
            raise ConfigurationError("train.source is 'manifest' but train.manifest is unset")
        dataset = _manifest_dataset(train_cfg["manifest"], config, net_config, settings)
        test_set = dataset
    else:
        raise ConfigurationError(f"unknown train.source '{train_cfg['source']}'")

    if args.resume:
        state = load_checkpoint(args.resume, net_config)
    else:
        state = build(net_config, seed)

    eval_every = max(1, int(train_cfg["eval_every"]))
    log_lines = ["iteration\tloss\tlr\ttest_nme"]
    start_report = evaluate(state, test_set)
    log_lines.append(f"-\t-\t-\t{start_report.mean_nme:.17g}")
    remaining = settings.iterations
    while remaining > 0:
        chunk = min(eval_every, remaining)
        chunk_log = []
        alternate_optimize(state, dataset, chunk, settings, log=chunk_log)
        remaining -= chunk
        report = evaluate(state, test_set)
        for iteration, loss, lr in chunk_log:
            log_lines.append(f"{iteration}\t{loss:.17g}\t{lr:.17g}\t-")
        log_lines.append(f"{state.iteration}\t-\t-\t{report.mean_nme:.17g}")
        print(f"iteration {state.iteration}: test NME {report.mean_nme:.17g}")
    (out / "train_log.tsv").write_text("\n".join(log_lines) + "\n")
    save_checkpoint(state, out / "checkpoint.bin")
    final = evaluate(state, test_set)
    (out / "report.txt").write_text(final.to_text())
    print(f"final test NME {final.mean_nme:.17g} "
          f"(started at {start_report.mean_nme:.17g}); checkpoint in {out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fldkit",
        description="facial landmark heatmap toolkit: encoding, search decoding, "
                    "metrics, verification suites, and a desk-scale trainer")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-key configuration override (repeatable)")
    # accept the global flags after the subcommand too; SUPPRESS keeps the
    # subparser from clobbering values parsed at the top level
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=argparse.SUPPRESS)
    shared.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    shared.add_argument("--set", action="append", default=argparse.SUPPRESS,
                        metavar="KEY=VALUE")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", parents=[shared], help="write ground-truth heatmaps for a manifest")
    p.add_argument("manifest")
    p.add_argument("scheme", help="w68 | c29 | a19 | f98 or a scheme file path")
    p.add_argument("--out", required=True)

    p = sub.add_parser("search", parents=[shared], help="decode landmarks from heatmap dumps")
    p.add_argument("heatmaps", help="directory produced by encode (or compatible)")
    p.add_argument("scheme")
    p.add_argument("--gt-manifest", help="optional ground truth for per-record errors")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[shared], help="score predictions against ground truth")
    p.add_argument("predictions", help="directory of .pts prediction files")
    p.add_argument("gt_manifest")
    p.add_argument("--normalization", default="inter_ocular",
                   choices=["inter_pupil", "inter_ocular", "face_size"])
    p.add_argument("--scheme", help="scheme for landmark-based normalizations")
    p.add_argument("--decoder", choices=["argmax", "searched"],
                   help="select *_argmax.pts or *_searched.pts outputs of `search`")
    p.add_argument("--out", required=True)

    p = sub.add_parser("verify", parents=[shared], help="run the numerical verification suites")
    p.add_argument("suites", nargs="+",
                   choices=["gradcheck", "newton_schulz", "js", "search", "all"])
    p.add_argument("--out")

    p = sub.add_parser("train", parents=[shared], help="desk-scale alternating-optimization training")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        handler = {
            "encode": cmd_encode,
            "search": cmd_search,
            "eval": cmd_eval,
            "verify": cmd_verify,
            "train": cmd_train,
        }[args.command]
        return handler(args, config)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, DimensionError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except FldkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
