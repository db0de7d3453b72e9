"""Command-line entry point: ``latcomp <subcommand> [--preset NAME] [--config FILE] ...``

Every subcommand is also importable as a ``cmd_*`` function taking a
:class:`~latcomp.config.RunConfig`.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .archive import (ArchiveMeta, LatentStore, SourceMeta, compression_ratio, read_latent,
                      write_latent)
from .codec import LatentRepr, decode, encode, reconstruct, train_vae
from .config import CODEC_PRESETS, DOWN_PRESETS, RunConfig, load_config
from .downscale import downscale, interp_baseline, resize_baseline, train_downscaler
from .errors import ConfigError, DataError, FingerprintError, TrainingAborted
from .grid import GridField, NormStats, zscore_apply, zscore_fit_all, zscore_invert
from .metrics import (aggregate_report, density_histogram, evaluate_sample, write_report_json,
                      write_rows_csv, write_spectrum_csv, zonal_power_spectrum)
from .synthetic import PairSpec, SyntheticSpec, gen_forecast_pair, gen_grf, ingest_container, write_raw
from .training import history_csv, load_checkpoint, save_checkpoint

log = logging.getLogger("latcomp")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_DATA = 0, 2, 3, 4
MANIFEST = "manifest.json"
BASE_TIME = datetime(2020, 1, 1, tzinfo=timezone.utc)


def _atomic_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _prepare_out(out: Path, force: bool):
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


# --- datasets -----------------------------------------------------------------

def _sample_seed(seed, i, j=0) -> int:
    return int(np.random.SeedSequence([seed, i, j]).generate_state(1, np.uint64)[0] >> 1)


def _data_key(cfg: RunConfig) -> str:
    doc = dict(cfg.to_dict()["data"], seed=cfg.seed)
    doc.pop("path", None)
    doc.pop("codec_checkpoint", None)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def cmd_synth(cfg: RunConfig, out=None, force=False) -> Path:
    """Write the synthetic dataset described by ``cfg.data`` plus a manifest."""
    out = Path(out or cfg.out)
    _prepare_out(out, force)
    d = cfg.data
    entries = []
    for i in range(d.n_train + d.n_test):
        sid = f"s{i:05d}"
        split = "train" if i < d.n_train else "test"
        ts = BASE_TIME + timedelta(hours=i)
        if d.kind == "fields":
            chans = [gen_grf(SyntheticSpec(d.dims, v.beta, v.amplitude, v.mean_offset,
                                           _sample_seed(cfg.seed, i, j), v.name)).values[0]
                     for j, v in enumerate(d.variables)]
            field = GridField(np.stack(chans), d.variable_names, timestamp=ts)
            files = {"fields": write_raw(field, out / f"{sid}.f32").name}
        else:
            v = d.variables[0]
            spec = SyntheticSpec(d.dims, v.beta, v.amplitude, v.mean_offset, _sample_seed(cfg.seed, i), v.name)
            low, high = gen_forecast_pair(PairSpec(spec, d.downsample_factor, d.input_channels,
                                                   mixing_seed=cfg.seed))
            lead = 6 * (1 + i % 4)
            low = replace(low, timestamp=ts, lead_time=lead)
            high = replace(high, timestamp=ts, lead_time=lead)
            files = {"low": write_raw(low, out / f"{sid}.low.f32").name,
                     "high": write_raw(high, out / f"{sid}.high.f32").name}
        sums = {name: _sha256(out / f) for name, f in files.items()}
        entries.append({"id": sid, "split": split, "files": files, "sha256": sums})
    manifest = {"kind": d.kind, "seed": cfg.seed, "data": cfg.to_dict()["data"], "entries": entries}
    _atomic_text(out / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True))
    log.info("wrote %d samples to %s", len(entries), out)
    return out


def dataset_dir(cfg: RunConfig) -> Path:
    """The configured dataset, synthesizing it into ``$LATCOMP_CACHE`` on first use."""
    if cfg.data.path:
        path = Path(cfg.data.path)
        if not (path / MANIFEST).exists():
            raise DataError(f"{path} has no {MANIFEST}")
        return path
    cache = Path(os.environ.get("LATCOMP_CACHE", Path.home() / ".cache" / "latcomp"))
    path = cache / f"{cfg.data.kind}-{_data_key(cfg)}"
    if not (path / MANIFEST).exists():
        cmd_synth(cfg, out=path, force=True)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        return json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise DataError(f"{path} has no {MANIFEST}") from None


def load_split(path, split: str, role: str = "fields") -> dict:
    """``{sample_id: GridField}`` for one split and file role."""
    path = Path(path)
    out = {}
    for e in read_manifest(path)["entries"]:
        if e["split"] != split:
            continue
        f = path / e["files"][role]
        meta = json.loads(f.with_suffix(".json").read_text())
        out[e["id"]] = ingest_container(f, meta["variables"])
    return out


def _stack(fields: dict) -> np.ndarray:
    return np.stack([f.values for f in fields.values()])


# --- training -----------------------------------------------------------------

def _finish_run(cfg: RunConfig, out: Path):
    _atomic_text(out / "config.yaml", cfg.dump())


def cmd_train_vae(cfg: RunConfig, out=None, force=False) -> list[Path]:
    if cfg.preset not in CODEC_PRESETS:
        if cfg.preset in ("resize", "down_inter"):
            raise ConfigError(f"preset {cfg.preset} is an interpolation baseline and needs no training")
        raise ConfigError(f"preset {cfg.preset} trains a U-Net; use train-down")
    out = Path(out or cfg.out)
    _prepare_out(out, force)
    data = dataset_dir(cfg)
    train = load_split(data, "train")
    variables = cfg.data.variable_names
    stats = zscore_fit_all(list(train.values()), variables)
    stats.save(out / "norm_stats.json")
    norm = _stack({k: zscore_apply(f, stats) for k, f in train.items()})
    groups = [(v,) for v in variables] if cfg.per_variable else [variables]
    paths = []
    for names in groups:
        codec_cfg = replace(cfg.codec, in_channels=len(names))
        idx = [variables.index(n) for n in names]
        tag = "-".join(names) if cfg.per_variable else "joint"
        params, history = train_vae(norm[:, idx], cfg.schedule, codec_cfg, variables=names,
                                    norm_stats=NormStats({n: stats[n] for n in names}),
                                    checkpoint_dir=out / "checkpoints" / tag)
        paths.append(save_checkpoint(params, out / f"codec-{tag}.ckpt", history))
        _atomic_text(out / f"history-{tag}.csv", history_csv(history))
    _finish_run(cfg, out)
    return paths


def cmd_train_down(cfg: RunConfig, out=None, force=False) -> Path:
    if cfg.preset not in DOWN_PRESETS:
        if cfg.preset in ("resize", "down_inter"):
            raise ConfigError(f"preset {cfg.preset} is an interpolation baseline and needs no training")
        raise ConfigError(f"preset {cfg.preset} trains a codec; use train-vae")
    out = Path(out or cfg.out)
    _prepare_out(out, force)
    data = dataset_dir(cfg)
    lows, highs = load_split(data, "train", "low"), load_split(data, "train", "high")
    in_vars = next(iter(lows.values())).variables
    target = cfg.data.variable_names[0]
    in_stats = zscore_fit_all(list(lows.values()), in_vars)
    codec = None
    if cfg.unet.mode == "latent":
        if not cfg.data.codec_checkpoint:
            raise ConfigError("down_latent needs data.codec_checkpoint")
        codec, _ = load_checkpoint(cfg.data.codec_checkpoint, "codec")
        if codec.variables != (target,):
            raise ConfigError(f"codec encodes {codec.variables}, target is {target}")
        out_stats = codec.stats("input")
    else:
        out_stats = zscore_fit_all(list(highs.values()), (target,))
    x = _stack({k: zscore_apply(f, in_stats) for k, f in lows.items()})
    y = _stack({k: zscore_apply(f.select([target]), out_stats) for k, f in highs.items()})
    params, history = train_downscaler((x, y), cfg.down_schedule, cfg.unet.mode, cfg.unet,
                                       codec=codec, input_stats=in_stats, output_stats=out_stats,
                                       input_variables=in_vars, output_variables=(target,),
                                       checkpoint_dir=out / "checkpoints")
    path = save_checkpoint(params, out / "unet.ckpt", history)
    _atomic_text(out / "history.csv", history_csv(history))
    _finish_run(cfg, out)
    return path


# --- prediction -----------------------------------------------------------------

def _load_codecs(paths) -> list:
    if not paths:
        raise ConfigError("no codec checkpoint given")
    return [load_checkpoint(p, "codec")[0] for p in paths]


def cmd_predict(cfg: RunConfig, checkpoints=(), out=None, force=False, blend="feather") -> Path:
    """Test-split predictions of the preset's method, one ``<id>.f32`` per sample."""
    out = Path(out or cfg.out)
    _prepare_out(out, force)
    data = dataset_dir(cfg)
    if cfg.data.kind == "fields":
        if cfg.preset not in ("resize",) + CODEC_PRESETS:
            raise ConfigError(f"preset {cfg.preset} does not predict from plain fields")
        test = load_split(data, "test")
        codecs = [] if cfg.preset == "resize" else _load_codecs(checkpoints)
        for sid, f in test.items():
            if cfg.preset == "resize":
                pred = resize_baseline(f, cfg.data.downsample_factor)
            else:
                parts = [reconstruct(f, c).values for c in codecs]
                names = sum((c.variables for c in codecs), ())
                pred = f.with_values(np.concatenate(parts), variables=names)
            write_raw(pred, out / f"{sid}.f32")
    else:
        lows, highs = load_split(data, "test", "low"), load_split(data, "test", "high")
        target = cfg.data.variable_names[0]
        unet = codec = None
        if cfg.preset in DOWN_PRESETS:
            ckpts = list(checkpoints)
            unet = next((p for p in (load_checkpoint(c)[0] for c in ckpts) if p.kind == "unet"), None)
            if unet is None:
                raise ConfigError("no U-Net checkpoint given")
            if cfg.unet.mode == "latent":
                codec, _ = load_checkpoint(cfg.data.codec_checkpoint, "codec")
        elif cfg.preset != "down_inter":
            raise ConfigError(f"preset {cfg.preset} does not predict from forecast pairs")
        for sid, low in lows.items():
            dims = highs[sid].dims
            if unet is None:
                pred = interp_baseline(low, target, dims)
            else:
                pred = downscale(low, unet, codec, target_dims=dims, blend=blend)
            write_raw(replace(pred, lead_time=low.lead_time), out / f"{sid}.f32")
    _finish_run(cfg, out)
    return out


# --- archive ------------------------------------------------------------------

def cmd_encode(cfg: RunConfig, inputs=None, checkpoints=(), out=None, split="test",
               dtype="float16", mode="mu_only"):
    """Encode every field of ``split`` into a latent store; returns ``(store, RatioReport)``."""
    data = Path(inputs) if inputs else dataset_dir(cfg)
    store = LatentStore(Path(out or cfg.out) / "latents")
    codecs = _load_codecs(checkpoints)
    fields_ = load_split(data, split)
    header = None
    for sid, f in fields_.items():
        for c in codecs:
            stats = c.stats("input")
            norm = zscore_apply(f.select(c.variables), stats)
            lat = encode(norm, c)
            header = write_latent(store, f"{'+'.join(c.variables)}/{sid}", lat, mode, dtype,
                                  variable="+".join(c.variables), timestamp=f.timestamp.isoformat(),
                                  norm_stats_hash=stats.digest(), codec_fingerprint=c.fingerprint)
    if header is None:
        raise DataError(f"no fields in split {split!r} of {data}")
    n = len(fields_) * len(codecs)
    channels = {c.config.in_channels for c in codecs}
    if len(channels) != 1:
        raise ConfigError("codecs with different channel counts cannot share a ratio report")
    report = compression_ratio(SourceMeta(header.source_dims, channels.pop(), "float32", n),
                               ArchiveMeta.from_header(header, count=n))
    _atomic_text(store.root.parent / "ratio.json", json.dumps(report.to_json(), indent=2))
    return store, report


def cmd_decode(cfg: RunConfig, store, keys=None, checkpoints=(), out=None) -> dict:
    """Decode stored latents back to physical fields; ``{key: path}``."""
    store = LatentStore(store)
    codecs = {"+".join(c.variables): c for c in _load_codecs(checkpoints)}
    keys = list(keys or store.keys())
    dest = Path(out or cfg.out) / "decoded"
    written = {}
    for key in keys:
        if key not in store:
            raise DataError(f"key {key!r} not found in {store.root}")
        latent, header = read_latent(store, key)
        codec = codecs.get(header.variable)
        if codec is None:
            raise FingerprintError(f"no codec for variables {header.variable!r} among {sorted(codecs)}")
        stats = codec.stats("input")
        if header.codec_fingerprint != codec.fingerprint:
            raise FingerprintError(f"{key!r} was encoded by codec {header.codec_fingerprint}, "
                                   f"got {codec.fingerprint}")
        if header.norm_stats_hash and header.norm_stats_hash != stats.digest():
            raise FingerprintError(f"{key!r} was encoded under different normalization statistics")
        mu = latent.mu if isinstance(latent, LatentRepr) else latent
        norm = decode(mu, codec)
        field = zscore_invert(replace(norm, timestamp=header.timestamp), stats)
        dest.mkdir(parents=True, exist_ok=True)
        written[key] = write_raw(field, dest / (key.replace("/", "__") + ".f32"))
    return written


# --- evaluation -----------------------------------------------------------------

def _read_dir(path) -> dict:
    path = Path(path)
    if (path / MANIFEST).exists():
        m = read_manifest(path)
        role = "fields" if m["kind"] == "fields" else "high"
        return load_split(path, "test", role)
    out = {}
    for f in sorted(path.glob("*.f32")):
        meta = json.loads(f.with_suffix(".json").read_text())
        out[f.stem] = ingest_container(f, meta["variables"])
    return out


def cmd_eval(cfg: RunConfig, truth, predictions: dict, out=None, dx_km: float = 1.0, bins: int = 100):
    """Score each method's predictions against the truth samples.

    ``predictions`` maps a method name to a directory of ``<id>.f32`` files.
    Writes ``metrics.csv`` (per sample), ``report.json`` (box stats per
    variable, lead time and method), and spectrum/histogram series.
    """
    if not predictions:
        raise ConfigError("no predictions to evaluate")
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    truth_fields = _read_dir(truth)
    if not truth_fields:
        raise DataError(f"no truth samples in {truth}")
    preds = {m: _read_dir(p) for m, p in predictions.items()}
    for m, fields_ in preds.items():
        missing = sorted(set(truth_fields) - set(fields_))
        extra = sorted(set(fields_) - set(truth_fields))
        if missing or extra:
            raise DataError(f"method {m!r} does not pair with truth: missing {missing[:5]}, "
                            f"unmatched {extra[:5]}")
    rows = []
    variables = None
    for m, fields_ in preds.items():
        for sid, t in truth_fields.items():
            p = fields_[sid]
            shared = [v for v in p.variables if v in t.variables]
            if not shared:
                raise DataError(f"{m}/{sid}: no variables in common with truth")
            variables = variables or shared
            for v in shared:
                rows.append({"sample": sid, "variable": v, "lead_time": t.lead_time, "method": m,
                             **evaluate_sample(t, p, v)})
    write_rows_csv(rows, out / "metrics.csv")
    write_report_json(aggregate_report(rows), out / "report.json")
    sources = {"truth": truth_fields, **preds}
    hist_rows = []
    for v in variables:
        all_vals = np.concatenate([f.channel(v).ravel() for f in truth_fields.values()])
        rng = (float(all_vals.min()), float(all_vals.max()))
        for name, fields_ in sources.items():
            spectra = [zonal_power_spectrum(f, v, dx_km) for f in fields_.values()]
            mean = replace(spectra[0], power=np.mean([s.power for s in spectra], axis=0))
            write_spectrum_csv(mean, out / f"spectrum_{name}_{v}.csv")
            h = density_histogram(list(fields_.values()), v, bins, rng)
            hist_rows += [f"{v},{name},{lo!r},{hi!r},{c}"
                          for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts.tolist())]
    _atomic_text(out / "histograms.csv", "variable,source,lo,hi,count\n" + "\n".join(hist_rows) + "\n")
    return out


# --- argument parsing -------------------------------------------------------------

def _common(p):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--preset", help="experiment preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latcomp", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("synth", "train-vae", "train-down"):
        _common(sub.add_parser(name))
    p = sub.add_parser("predict")
    _common(p)
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--blend", choices=("feather", "average"), default="feather")
    p = sub.add_parser("encode")
    _common(p)
    p.add_argument("--inputs", help="dataset directory (default: configured dataset)")
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--split", default="test")
    p.add_argument("--dtype", choices=("float16", "float32"), default="float16")
    p.add_argument("--mode", choices=("mu_only", "mu_sigma"), default="mu_only")
    p = sub.add_parser("decode")
    _common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--key", action="append", dest="keys")
    p.add_argument("--checkpoint", action="append", default=[])
    p = sub.add_parser("eval")
    _common(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", action="append", default=[], metavar="METHOD=DIR")
    p.add_argument("--dx-km", type=float, default=1.0)
    p = sub.add_parser("show-config")
    _common(p)
    return ap


def _run(args) -> object:
    cfg = load_config(args.config, args.preset, seed=args.seed, deterministic=args.deterministic,
                      out=args.out)
    c = args.command
    if c == "show-config":
        sys.stdout.write(cfg.dump())
        return None
    if c == "synth":
        return cmd_synth(cfg, force=args.force)
    if c == "train-vae":
        return cmd_train_vae(cfg, force=args.force)
    if c == "train-down":
        return cmd_train_down(cfg, force=args.force)
    if c == "predict":
        return cmd_predict(cfg, args.checkpoint, force=args.force, blend=args.blend)
    if c == "encode":
        store, report = cmd_encode(cfg, args.inputs, args.checkpoint, split=args.split,
                                   dtype=args.dtype, mode=args.mode)
        print(f"ratio {report.ratio:.2f}x ({report.source_bytes} -> {report.archived_bytes} bytes)")
        return store.root
    if c == "decode":
        return cmd_decode(cfg, args.store, args.keys, args.checkpoint)
    if c == "eval":
        preds = {}
        for item in args.pred:
            method, sep, path = item.partition("=")
            if not sep:
                raise ConfigError(f"--pred expects METHOD=DIR, got {item!r}")
            preds[method] = path
        return cmd_eval(cfg, args.truth, preds, dx_km=args.dx_km)
    raise ConfigError(f"unknown command {c}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if result is not None:
        print(result if not isinstance(result, (list, dict)) else
              "\n".join(str(r) for r in (result.values() if isinstance(result, dict) else result)))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
