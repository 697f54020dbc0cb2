"""Command-line pipeline orchestration.

Subcommands mirror the attack flow: ``simulate`` produces traces plus
ground-truth sidecars, ``extract`` recovers per-cycle powers,
``attack-bg`` / ``build-template`` / ``attack-template`` run the two
attacks, and ``eval`` scores recovered images. Every subcommand is
restartable from its input files alone; one global seed fans out to all
stochastic stages.

Exit codes: 0 ok, 2 config error, 3 data error, 4 attack not applicable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import attack_bg as bg
from . import metrics, template as tmod
from .accel import (CycleSchedule, generate_kernels, load_kernels,
                    run_all_kernels, save_kernels)
from .chain import add_noise, apply_highpass, render_pdn, read_trace, \
    sigma_for_snr, write_trace
from .config import RunConfig, load_config
from .digits import make_corpus
from .errors import (AttackNotApplicableError, ConfigError, ConvleakError,
                     FormatError)
from .extract import run_extraction, read_cycle_powers, write_cycle_powers
from .imgio import (Image, binarize_markers, load_idx, load_idx_labels,
                    load_pgm, write_pgm)
from .template import (GroupingConfig, _derived_seed, average_baseline,
                       build_template, generate_all_candidates,
                       measure_and_extract, read_template, reconstruct,
                       write_template, candidate_stats)


def _load_dataset(cfg: RunConfig):
    """(images, labels-or-None) for the configured range."""
    if cfg.images is not None:
        imgs = load_idx(cfg.images)
        labels = load_idx_labels(cfg.labels) if cfg.labels else None
        lo, hi = cfg.first_image, cfg.first_image + cfg.n_images
        if hi > len(imgs):
            raise ConfigError(
                f"dataset has {len(imgs)} images, requested up to {hi}")
        return imgs[lo:hi], (labels[lo:hi] if labels is not None else None)
    imgs, labels = make_corpus(cfg.first_image + cfg.n_images, seed=cfg.seed)
    return imgs[cfg.first_image:], labels[cfg.first_image:]


def _load_kernelset(cfg: RunConfig):
    if cfg.kernel_file is not None:
        kernels = load_kernels(cfg.kernel_file)
        if any(k.size != cfg.kernel_size for k in kernels):
            raise ConfigError("kernel file disagrees with kernel_size")
        return kernels
    return generate_kernels(cfg.n_kernels, cfg.kernel_size, seed=cfg.seed)


def _measure_trace(powers, cfg: RunConfig, image_id: int, kernel_id: int):
    """Chain a ground-truth power vector into a noisy raw trace."""
    ccfg = cfg.chain_config()
    ccfg = replace(ccfg, seed=_derived_seed(cfg.seed, image_id, kernel_id))
    trace = apply_highpass(render_pdn(powers, ccfg), ccfg)
    if cfg.snr_db is not None:
        ccfg = replace(ccfg, noise_sigma=sigma_for_snr(trace, cfg.snr_db))
    return add_noise(trace, ccfg)


def write_schedule(schedule: CycleSchedule, image_index: int, path) -> None:
    """Schedule sidecar as JSON lines: header then one line per valid cycle."""
    with open(path, "w", encoding="ascii") as fh:
        head = {"type": "header", "image": image_index,
                "height": schedule.image_shape[0],
                "width": schedule.image_shape[1],
                "kernel_size": schedule.kernel_size,
                "stride": list(schedule.stride),
                "scheduling": schedule.scheduling,
                "n_cycles": int(schedule.n_cycles),
                "n_valid": int(schedule.n_valid)}
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for j in range(schedule.n_valid):
            row = {"j": j, "cycle": int(schedule.valid_cycles[j]),
                   "origin": [int(v) for v in schedule.origins[j]],
                   "related": schedule.related[j].tolist()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_schedule(path) -> CycleSchedule:
    """Rebuild a CycleSchedule from its JSONL sidecar."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty schedule file")
    head = json.loads(lines[0])
    if head.get("type") != "header":
        raise FormatError(f"{path}: missing schedule header")
    rows = [json.loads(ln) for ln in lines[1:]]
    if len(rows) != head["n_valid"]:
        raise FormatError(f"{path}: expected {head['n_valid']} cycle rows")
    return CycleSchedule(
        image_shape=(head["height"], head["width"]),
        kernel_size=head["kernel_size"],
        stride=tuple(head["stride"]),
        n_cycles=head["n_cycles"],
        valid_cycles=np.array([r["cycle"] for r in rows], dtype=np.int64),
        origins=np.array([r["origin"] for r in rows], dtype=np.int32),
        related=np.array([r["related"] for r in rows], dtype=np.int32),
        scheduling=head["scheduling"],
    )


def cmd_simulate(cfg: RunConfig) -> int:
    images, labels = _load_dataset(cfg)
    kernels = _load_kernelset(cfg)
    acfg = cfg.accel_config()
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    os.makedirs(os.path.join(out, "golden"), exist_ok=True)
    kpath = os.path.join(out, "kernels.txt")
    save_kernels(kernels, kpath)

    manifest = {"config": asdict(cfg), "kernels": "kernels.txt",
                "n_images": len(images), "n_kernels": len(kernels),
                "images": [], "total_valid_cycles": 0}
    for i, img in enumerate(images):
        idx = cfg.first_image + i
        powers_list, schedule = run_all_kernels(img, kernels, acfg)
        spath = f"img{idx:04d}.schedule.jsonl"
        write_schedule(schedule, idx, os.path.join(out, spath))
        gpath = os.path.join("golden", f"img{idx:04d}.pgm")
        write_pgm(img, os.path.join(out, gpath))
        entry = {"index": idx, "schedule": spath, "golden": gpath,
                 "label": int(labels[i]) if labels is not None else None,
                 "n_valid": int(schedule.n_valid), "traces": []}
        for k, powers in enumerate(powers_list):
            tpath = f"img{idx:04d}_k{k:02d}.ptrc"
            gtpath = f"img{idx:04d}_k{k:02d}.gt.pcyc"
            trace = _measure_trace(powers, cfg, idx, k)
            write_trace(trace, os.path.join(out, tpath))
            write_cycle_powers(powers, os.path.join(out, gtpath))
            entry["traces"].append({"kernel": k, "trace": tpath,
                                    "ground_truth": gtpath,
                                    "noise_seed": _derived_seed(cfg.seed, idx, k)})
        manifest["images"].append(entry)
        manifest["total_valid_cycles"] += int(schedule.n_valid)
    with open(os.path.join(out, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    print(f"simulate: {len(images)} images x {len(kernels)} kernels -> {out}")
    return 0


def _read_manifest(path):
    with open(path, "r", encoding="ascii") as fh:
        return json.load(fh), os.path.dirname(os.path.abspath(path))


def cmd_extract(cfg: RunConfig, manifest_path: str | None,
                traces: list[str]) -> int:
    ecfg = cfg.extract_config()
    jobs = []
    base = "."
    if manifest_path is not None:
        manifest, base = _read_manifest(manifest_path)
        for entry in manifest["images"]:
            for tr in entry["traces"]:
                jobs.append(os.path.join(base, tr["trace"]))
    jobs.extend(traces)
    if not jobs:
        raise ConfigError("extract: no trace files given")
    report = []
    for path in jobs:
        trace = read_trace(path)
        ecfg_t = replace(ecfg, samples_per_cycle=trace.samples_per_cycle,
                         restore_tau=cfg.tau_highpass_cycles
                         * trace.samples_per_cycle * trace.sample_interval)
        powers, points, fits = run_extraction(trace, ecfg_t, return_fits=True)
        opath = os.path.splitext(path)[0] + ".extracted.pcyc"
        write_cycle_powers(powers, opath)
        resid = [f.residual for f in fits if np.isfinite(f.residual)]
        report.append({
            "trace": os.path.basename(path), "cycles": len(powers.values),
            "mean_fit_residual": float(np.mean(resid)) if resid else float("nan"),
            "low_confidence_cycles": sum(1 for f in fits if not f.converged)})
        print(f"extract: {os.path.basename(path)} -> "
              f"{os.path.basename(opath)} ({len(powers.values)} cycles)")
    rpath = os.path.join(os.path.dirname(jobs[0]) or ".", "extract_report.csv")
    with open(rpath, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(report[0].keys()))
        w.writeheader()
        w.writerows(report)
    return 0


def _reference_corpus(cfg: RunConfig):
    imgs, labels = make_corpus(cfg.n_references, seed=cfg.seed + 0xC0FFEE)
    return imgs, labels


def cmd_attack_bg(cfg: RunConfig, manifest_path: str, kernel: int) -> int:
    manifest, base = _read_manifest(manifest_path)
    out = os.path.join(cfg.out, "bg")
    os.makedirs(out, exist_ok=True)
    refs = None
    have_labels = any(e["label"] is not None for e in manifest["images"])
    if have_labels:
        refs, ref_labels = _reference_corpus(cfg)
    rows = []
    preds, golds = [], []
    for entry in manifest["images"]:
        schedule = read_schedule(os.path.join(base, entry["schedule"]))
        tr = entry["traces"][kernel]
        ppath = os.path.join(
            base, os.path.splitext(tr["trace"])[0] + ".extracted.pcyc")
        powers = read_cycle_powers(ppath)
        hist = bg.build_histogram(powers, schedule, cfg.bin_size)
        thr = bg.Threshold(cfg.threshold) if cfg.threshold is not None \
            else bg.select_threshold(hist)
        sil = bg.recover_silhouette(powers, schedule, thr,
                                    cfg.uncovered_foreground)
        spath = os.path.join(out, f"img{entry['index']:04d}.sil.pgm")
        write_pgm(binarize_markers(sil), spath)
        golden = load_pgm(os.path.join(base, entry["golden"]))
        acc = metrics.pixel_marker_accuracy(sil, golden)
        row = {"index": entry["index"], "threshold": thr.value,
               "background_cycles": int(np.sum(
                   bg.valid_powers(powers, schedule) <= thr.value)),
               "pixel_accuracy": acc, "label": entry["label"],
               "predicted": None}
        if refs is not None and entry["label"] is not None:
            pred = metrics.knn_recognize(binarize_markers(sil), refs,
                                         ref_labels, k=cfg.knn_k)
            row["predicted"] = int(pred)
            preds.append(int(pred))
            golds.append(int(entry["label"]))
        rows.append(row)
    with open(os.path.join(out, "report.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    mean_acc = float(np.mean([r["pixel_accuracy"] for r in rows]))
    lines = [f"images: {len(rows)}", f"kernel: {kernel}",
             f"mean pixel accuracy: {mean_acc:.4f}"]
    if preds:
        table, missing = metrics.classification_map(golds, preds)
        rec = float(np.mean(np.asarray(preds) == np.asarray(golds)))
        lines.append(f"recognition accuracy: {rec:.4f}")
        with open(os.path.join(out, "classification_map.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["predicted\\golden"] + list(range(10)))
            for i in range(10):
                w.writerow([i] + [f"{v:.4f}" if np.isfinite(v) else ""
                                  for v in table[i]])
        if missing:
            lines.append(f"classes missing from golden labels: {missing}")
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("attack-bg: " + "; ".join(lines))
    return 0


def cmd_build_template(cfg: RunConfig, out_path: str | None) -> int:
    images, _ = _load_dataset(cfg)
    kernels = _load_kernelset(cfg)
    ccfg = cfg.chain_config()
    tpl = build_template(images, kernels, cfg.accel_config(), ccfg,
                         cfg.extract_config(),
                         first_image_id=cfg.first_image)
    path = out_path or os.path.join(cfg.out, "template.ptpl")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_template(tpl, path)
    print(f"build-template: {tpl.n_entries} entries "
          f"({len(images)} images x {tpl.n_kernels} kernels) -> {path}")
    return 0


def cmd_attack_template(cfg: RunConfig, template_path: str,
                        with_stats: bool) -> int:
    tpl = read_template(template_path)
    images, labels = _load_dataset(cfg)
    kernels = _load_kernelset(cfg)
    if len(kernels) != tpl.n_kernels:
        raise ConfigError(
            f"template built with {tpl.n_kernels} kernels, config has "
            f"{len(kernels)}")
    grouping = GroupingConfig(group_size=cfg.group_size, delta=cfg.delta,
                              normalized=cfg.normalized)
    out = os.path.join(cfg.out, "template-attack")
    os.makedirs(out, exist_ok=True)
    rows = []
    stats_rows = None
    for i, img in enumerate(images):
        idx = cfg.first_image + i
        feats, schedule = measure_and_extract(
            img, kernels, cfg.accel_config(), cfg.chain_config(),
            cfg.extract_config(), image_id=idx)
        sets = generate_all_candidates(feats, tpl, grouping,
                                       schedule=schedule)
        rec, sel = reconstruct(sets, schedule.image_shape,
                               max_restarts=cfg.max_restarts, seed=cfg.seed)
        base_img = average_baseline(sets, schedule.image_shape)
        write_pgm(rec, os.path.join(out, f"img{idx:04d}.rec.pgm"))
        write_pgm(base_img, os.path.join(out, f"img{idx:04d}.avg.pgm"))
        empty = sum(1 for s in sets if len(s) == 0)
        rows.append({"index": idx,
                     "label": int(labels[i]) if labels is not None else None,
                     "objective": sel.objective, "empty_cycles": empty,
                     "max_restarts": cfg.max_restarts,
                     "pixel_distance": metrics.pixel_value_distance(rec, img),
                     "baseline_distance": metrics.pixel_value_distance(base_img, img)})
        if with_stats and stats_rows is None:
            from .accel import all_related_patches
            stats_rows = candidate_stats(
                feats, all_related_patches(img, schedule), tpl, grouping)
    with open(os.path.join(out, "report.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    if stats_rows is not None:
        with open(os.path.join(out, "candidates.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(stats_rows[0].keys()))
            w.writeheader()
            w.writerows(stats_rows)
    mean_d = float(np.mean([r["pixel_distance"] for r in rows]))
    mean_b = float(np.mean([r["baseline_distance"] for r in rows]))
    print(f"attack-template: {len(rows)} images, mean distance "
          f"{mean_d:.3f} (baseline {mean_b:.3f}) -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, recovered_dir: str, mode: str) -> int:
    images, labels = _load_dataset(cfg)
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    suffix = ".sil.pgm" if mode == "bg" else ".rec.pgm"
    recs, golds, idxs = [], [], []
    for i, img in enumerate(images):
        idx = cfg.first_image + i
        path = os.path.join(recovered_dir, f"img{idx:04d}{suffix}")
        if not os.path.exists(path):
            raise FormatError(f"eval: missing recovered image {path}")
        recs.append(load_pgm(path))
        golds.append(img)
        idxs.append(idx)
    if labels is None:
        print("eval: no golden labels; recognition metrics skipped",
              file=sys.stderr)
    rows = []
    for r, g, idx in zip(recs, golds, idxs):
        if mode == "bg":
            from .imgio import SilhouetteImage
            sil = SilhouetteImage(r.pixels != 0)
            metric = metrics.pixel_marker_accuracy(sil, g)
        else:
            metric = metrics.pixel_value_distance(r, g)
        rows.append({"index": idx, "pixel_metric": metric,
                     "label": None, "predicted": None, "correct": None})
    if labels is not None:
        refs, ref_labels = _reference_corpus(cfg)
        preds = metrics.knn_recognize_batch(recs, refs, ref_labels, k=cfg.knn_k)
        for row, label, pred in zip(rows, labels, preds):
            row["label"] = int(label)
            row["predicted"] = int(pred)
            row["correct"] = bool(pred == label)
        table, missing = metrics.classification_map(labels, preds)
        with open(os.path.join(out, "classification_map.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["predicted\\golden"] + list(range(10)))
            for i in range(10):
                w.writerow([i] + [f"{v:.4f}" if np.isfinite(v) else ""
                                  for v in table[i]])
    with open(os.path.join(out, "eval.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    mean_metric = float(np.mean([r["pixel_metric"] for r in rows]))
    summary = [f"images: {len(rows)}", f"mode: {mode}",
               f"mean pixel metric: {mean_metric:.4f}"]
    if labels is not None:
        acc = float(np.mean([r["correct"] for r in rows]))
        summary.append(f"recognition accuracy: {acc:.4f}")
    with open(os.path.join(out, "eval_summary.txt"), "w") as fh:
        fh.write("\n".join(summary) + "\n")
    print("eval: " + "; ".join(summary))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="convleak",
        description="Power side-channel laboratory for line-buffer CNN "
                    "accelerators")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config key")

    sp = sub.add_parser("simulate", help="simulate traces + ground truth")
    common(sp)

    sp = sub.add_parser("extract", help="recover cycle powers from traces")
    common(sp)
    sp.add_argument("--manifest", help="manifest.json from simulate")
    sp.add_argument("traces", nargs="*", help="explicit PTRC trace files")

    sp = sub.add_parser("attack-bg", help="background-detection attack")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--kernel", type=int, default=0,
                    help="kernel index whose trace to attack")

    sp = sub.add_parser("build-template", help="profile a power template")
    common(sp)
    sp.add_argument("--template-out", help="output template path")

    sp = sub.add_parser("attack-template", help="template reconstruction attack")
    common(sp)
    sp.add_argument("--template", required=True)
    sp.add_argument("--stats", action="store_true",
                    help="emit a candidate-statistics table")

    sp = sub.add_parser("eval", help="score recovered images")
    common(sp)
    sp.add_argument("--recovered", required=True,
                    help="directory of recovered images")
    sp.add_argument("--mode", choices=["bg", "template"], default="bg")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "extract":
            return cmd_extract(cfg, args.manifest, args.traces)
        if args.command == "attack-bg":
            return cmd_attack_bg(cfg, args.manifest, args.kernel)
        if args.command == "build-template":
            return cmd_build_template(cfg, args.template_out)
        if args.command == "attack-template":
            return cmd_attack_template(cfg, args.template, args.stats)
        if args.command == "eval":
            return cmd_eval(cfg, args.recovered, args.mode)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AttackNotApplicableError as exc:
        print(f"attack not applicable: {exc}", file=sys.stderr)
        return 4
    except (ConvleakError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
