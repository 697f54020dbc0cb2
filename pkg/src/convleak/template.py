"""Active-adversary power-template attack.

Profiling runs the full simulate / measure / extract pipeline over a
corpus with several kernels and stores, for every valid cycle, the pair
(related-pixel patch, per-kernel power feature vector). At attack time
the measured feature vector of each cycle is split into kernel groups;
each group retrieves the template patches within a distance threshold,
and the per-group sets are intersected to a small candidate set. A
greedy selector then pieces the image together by choosing, cycle by
cycle, the candidate most consistent with already-decided pixels,
keeping the restart whose per-pixel variance objective is smallest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (ConfigError, DataLengthError, DimensionError,
                     FormatError, ReconstructionError, TemplateBuildError)
from .accel import (AccelConfig, CycleSchedule, Kernel, all_related_patches,
                    run_all_kernels)
from .chain import ChainConfig, measure
from .extract import ExtractConfig, run_extraction
from .imgio import Image

PTPL_MAGIC = b"PTPL"
PTPL_VERSION = 1


@dataclass
class PowerTemplate:
    """Profiling database: related-pixel patches with power features.

    ``patches``  : (n_entries, K*(K+1)) uint8 pixel values
    ``features`` : (n_entries, n_kernels) extracted cycle powers
    ``kernel_means`` / ``kernel_stds`` : per-kernel feature statistics
    used for the std-unit distance normalization.
    """

    kernel_size: int
    patches: np.ndarray
    features: np.ndarray
    kernel_means: np.ndarray
    kernel_stds: np.ndarray
    _patch_ids: np.ndarray | None = field(default=None, repr=False)
    _unique_patches: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_entries(self) -> int:
        return len(self.patches)

    @property
    def n_kernels(self) -> int:
        return self.features.shape[1]

    @property
    def patch_len(self) -> int:
        return self.patches.shape[1]

    def patch_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(unique_patches, entry_to_patch_id); cached after first use."""
        if self._patch_ids is None:
            uniq, inv = np.unique(self.patches, axis=0, return_inverse=True)
            self._unique_patches = uniq
            self._patch_ids = inv.astype(np.int64)
        return self._unique_patches, self._patch_ids

    def normalized_features(self, normalized: bool = True) -> np.ndarray:
        if not normalized:
            return self.features
        stds = np.where(self.kernel_stds > 0, self.kernel_stds, 1.0)
        return (self.features - self.kernel_means) / stds

    def normalize_query(self, feats: np.ndarray, normalized: bool = True) -> np.ndarray:
        if not normalized:
            return np.asarray(feats, dtype=np.float64)
        stds = np.where(self.kernel_stds > 0, self.kernel_stds, 1.0)
        return (np.asarray(feats, dtype=np.float64) - self.kernel_means) / stds


@dataclass
class GroupingConfig:
    """Kernel grouping and distance threshold for candidate search.

    ``groups`` partitions kernel indices; by default contiguous blocks
    of ``group_size``. ``delta`` is the per-group L1 distance threshold
    in per-kernel standard-deviation units (raw power units when
    ``normalized`` is off).
    """

    groups: tuple[tuple[int, ...], ...] | None = None
    group_size: int = 3
    delta: float = 1.0
    normalized: bool = True

    def resolve(self, n_kernels: int) -> tuple[tuple[int, ...], ...]:
        if self.groups is not None:
            seen = [i for g in self.groups for i in g]
            if len(set(seen)) != len(seen):
                raise ConfigError("kernel groups must be disjoint")
            if any(i < 0 or i >= n_kernels for i in seen):
                raise ConfigError("kernel group index out of range")
            return tuple(tuple(g) for g in self.groups)
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        n_groups = n_kernels // self.group_size
        if n_groups < 1:
            raise ConfigError("fewer kernels than one group")
        return tuple(
            tuple(range(g * self.group_size, (g + 1) * self.group_size))
            for g in range(n_groups))


@dataclass
class CandidateSet:
    """Plausible related-pixel patches for one cycle."""

    cycle: int
    candidates: np.ndarray          # (n_cand, patch_len) uint8, deduplicated
    group_sizes: list[int]
    region: np.ndarray              # (patch_len, 2) related coordinates

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass
class Selector:
    """Per-cycle candidate choices (-1 = skipped) and their objective."""

    choices: np.ndarray
    objective: float


def _derived_seed(base: int, *scope) -> int:
    return int(np.random.SeedSequence((base, *scope)).generate_state(1)[0])


def measure_and_extract(img: Image, kernels: list[Kernel], acfg: AccelConfig,
                        ccfg: ChainConfig, ecfg: ExtractConfig | None = None,
                        image_id: int = 0) -> tuple[np.ndarray, CycleSchedule]:
    """Per-kernel measured power features for every valid cycle.

    Runs the full pipeline per kernel (simulate, render, AC-couple,
    noise, extract) with a noise seed derived from (chain seed,
    image_id, kernel index), and returns the (n_valid, n_kernels)
    feature matrix plus the shared schedule.
    """
    if ecfg is None:
        ecfg = ExtractConfig()
    ecfg = replace(ecfg,
                   samples_per_cycle=ccfg.samples_per_cycle,
                   restore_tau=ccfg.tau_highpass)
    powers_list, schedule = run_all_kernels(img, kernels, acfg)
    feats = np.empty((schedule.n_valid, len(kernels)), dtype=np.float64)
    for k, powers in enumerate(powers_list):
        ck = replace(ccfg, seed=_derived_seed(ccfg.seed, image_id, k))
        trace = measure(powers, ck)
        extracted, _ = run_extraction(trace, ecfg)
        if len(extracted.values) != schedule.n_cycles:
            raise DataLengthError(
                f"extracted {len(extracted.values)} cycles, "
                f"simulated {schedule.n_cycles}")
        feats[:, k] = extracted.values[schedule.valid_cycles]
    return feats, schedule


def build_template(images: list[Image], kernels: list[Kernel],
                   acfg: AccelConfig, ccfg: ChainConfig | None = None,
                   ecfg: ExtractConfig | None = None,
                   first_image_id: int = 0) -> PowerTemplate:
    """Profile a corpus into a power template.

    One entry per valid cycle per image; the feature vector gathers the
    same cycle's extracted power across all kernels, which requires the
    deterministic sequential schedule. Randomized kernel scheduling
    makes those vectors incoherent, so it is rejected outright: that is
    the scheduling countermeasure doing its job.
    """
    if not images:
        raise ConfigError("profiling image set is empty")
    if acfg.scheduling == "random":
        raise TemplateBuildError(
            "cannot build a power template under random kernel scheduling: "
            "per-cycle features from different kernels no longer describe "
            "the same pixels")
    if ccfg is None:
        ccfg = ChainConfig()
    all_patches, all_feats = [], []
    for i, img in enumerate(images):
        feats, schedule = measure_and_extract(
            img, kernels, acfg, ccfg, ecfg, image_id=first_image_id + i)
        all_patches.append(all_related_patches(img, schedule))
        all_feats.append(feats)
    patches = np.concatenate(all_patches)
    features = np.concatenate(all_feats)
    return PowerTemplate(
        kernel_size=kernels[0].size,
        patches=patches,
        features=features,
        kernel_means=features.mean(axis=0),
        kernel_stds=features.std(axis=0),
    )


def generate_candidates(feature_vec: np.ndarray, template: PowerTemplate,
                        grouping: GroupingConfig,
                        cycle: int = 0,
                        region: np.ndarray | None = None) -> CandidateSet:
    """Candidate patches for one cycle's measured feature vector."""
    sets = generate_all_candidates(np.asarray(feature_vec)[None, :],
                                   template, grouping,
                                   regions=None if region is None else region[None])
    cs = sets[0]
    cs.cycle = cycle
    return cs


def group_patch_hits(features: np.ndarray, template: PowerTemplate,
                     grouping: GroupingConfig,
                     chunk: int = 48) -> list[list[np.ndarray]]:
    """Per-group candidate patch ids for every query feature vector.

    ``result[g][j]`` holds the sorted unique patch ids whose template
    entries lie within the L1 ball of radius delta around query j in
    group g's (normalized) feature subspace. Distances are evaluated in
    dense float32 chunks; the resulting per-group ball memberships are
    what the intersection step consumes.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != template.n_kernels:
        raise DimensionError(
            f"feature matrix must be (n, {template.n_kernels})")
    groups = grouping.resolve(template.n_kernels)
    _, entry_pid = template.patch_index()
    e_all = template.normalized_features(grouping.normalized).astype(np.float32)
    q_all = template.normalize_query(features, grouping.normalized).astype(np.float32)
    out: list[list[np.ndarray]] = []
    for g in groups:
        e = np.ascontiguousarray(e_all[:, list(g)])
        q = np.ascontiguousarray(q_all[:, list(g)])
        hits_g: list[np.ndarray] = []
        for lo in range(0, len(q), chunk):
            qc = q[lo:lo + chunk]
            # (chunk, n_entries) L1 distances in the group subspace
            d = np.abs(qc[:, None, 0] - e[None, :, 0])
            for c in range(1, e.shape[1]):
                d += np.abs(qc[:, None, c] - e[None, :, c])
            passes = d <= grouping.delta
            for row in passes:
                idx = np.flatnonzero(row)
                hits_g.append(np.unique(entry_pid[idx]) if len(idx)
                              else np.empty(0, np.int64))
        out.append(hits_g)
    return out


def generate_all_candidates(features: np.ndarray, template: PowerTemplate,
                            grouping: GroupingConfig,
                            schedule: CycleSchedule | None = None,
                            regions: np.ndarray | None = None) -> list[CandidateSet]:
    """Candidate sets for every cycle of a feature matrix.

    Per group the search is an L1 ball query in that group's feature
    subspace; the final set is the intersection (exact byte equality on
    patches) across groups. Candidates come out sorted by patch bytes,
    which fixes the tie-break order downstream.
    """
    per_group = group_patch_hits(features, template, grouping)
    uniq, _ = template.patch_index()
    if regions is None and schedule is not None:
        regions = schedule.related
    out = []
    for j in range(len(per_group[0])):
        pids = None
        sizes = []
        for hits_g in per_group:
            g_pids = hits_g[j]
            sizes.append(len(g_pids))
            pids = g_pids if pids is None else np.intersect1d(
                pids, g_pids, assume_unique=True)
        cands = uniq[pids] if len(pids) else np.empty(
            (0, template.patch_len), dtype=np.uint8)
        region = regions[j] if regions is not None else None
        out.append(CandidateSet(cycle=j, candidates=cands,
                                group_sizes=sizes, region=region))
    return out


def _fill_empty(mean: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Fill never-covered pixels from the mean of filled 4-neighbors."""
    mean = mean.copy()
    filled = filled.copy()
    while not filled.all():
        fm = filled.astype(np.float64)
        vm = np.where(filled, mean, 0.0)
        nsum = np.zeros_like(vm)
        ncnt = np.zeros_like(fm)
        nsum[1:, :] += vm[:-1, :]; ncnt[1:, :] += fm[:-1, :]
        nsum[:-1, :] += vm[1:, :]; ncnt[:-1, :] += fm[1:, :]
        nsum[:, 1:] += vm[:, :-1]; ncnt[:, 1:] += fm[:, :-1]
        nsum[:, :-1] += vm[:, 1:]; ncnt[:, :-1] += fm[:, 1:]
        grow = (~filled) & (ncnt > 0)
        if not grow.any():
            break
        mean[grow] = nsum[grow] / ncnt[grow]
        filled |= grow
    return mean


def _round_half_up(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)


class _GreedyState:
    """Shared precomputation for the greedy reconstruction restarts."""

    def __init__(self, sets: list[CandidateSet], shape: tuple[int, int]):
        self.shape = shape
        h, w = shape
        self.n_pix = h * w
        self.n_sets = len(sets)
        self.pix_ids = []
        self.values = []
        for cs in sets:
            if cs.region is None:
                raise ConfigError("candidate sets need their related regions")
            inside = cs.region[:, 0] >= 0
            self.pix_ids.append(
                (cs.region[inside, 0] * w + cs.region[inside, 1]).astype(np.int64))
            self.values.append(cs.candidates[:, inside].astype(np.float64))
        self.empty = np.array([len(v) == 0 for v in self.values])
        # pixel -> covering cycles, CSR layout
        all_p = np.concatenate(self.pix_ids) if self.pix_ids else np.empty(0, np.int64)
        all_j = np.concatenate([np.full(len(p), j, dtype=np.int64)
                                for j, p in enumerate(self.pix_ids)]) \
            if self.pix_ids else np.empty(0, np.int64)
        order = np.argsort(all_p, kind="stable")
        self.cov_j = all_j[order]
        sp = all_p[order]
        self.cov_start = np.searchsorted(sp, np.arange(self.n_pix), side="left")
        self.cov_end = np.searchsorted(sp, np.arange(self.n_pix), side="right")

    def run(self, seed_cycle: int, seed_choice: int):
        """One greedy pass; returns (selector, sigma, pix_sum, pix_cnt)."""
        pix_sum = np.zeros(self.n_pix)
        pix_sq = np.zeros(self.n_pix)
        pix_cnt = np.zeros(self.n_pix, dtype=np.int64)
        overlap = np.zeros(self.n_sets, dtype=np.int64)
        processed = self.empty.copy()
        choices = np.full(self.n_sets, -1, dtype=np.int64)

        def apply(j: int, c: int):
            pids = self.pix_ids[j]
            vals = self.values[j][c]
            fresh = pids[pix_cnt[pids] == 0]
            pix_sum[pids] += vals
            pix_sq[pids] += vals * vals
            pix_cnt[pids] += 1
            if len(fresh):
                js = np.concatenate([
                    self.cov_j[self.cov_start[p]:self.cov_end[p]] for p in fresh])
                np.add.at(overlap, js, 1)
            choices[j] = c
            processed[j] = True

        apply(seed_cycle, seed_choice)
        while True:
            masked = np.where(processed, -1, overlap)
            t = int(np.argmax(masked))
            if masked[t] < 0:
                break
            pids = self.pix_ids[t]
            vals = self.values[t]
            known = pix_cnt[pids] > 0
            if known.any():
                cur = pix_sum[pids[known]] / pix_cnt[pids[known]]
                d = np.mean((vals[:, known] - cur[None, :]) ** 2, axis=1)
                c = int(np.argmin(d))
            else:
                c = 0
            apply(t, c)

        covered = pix_cnt > 0
        var = np.zeros(self.n_pix)
        var[covered] = (pix_sq[covered] / pix_cnt[covered]
                        - (pix_sum[covered] / pix_cnt[covered]) ** 2)
        sigma = float(np.maximum(var, 0.0).sum())
        return choices, sigma, pix_sum, pix_cnt


def reconstruct(sets: list[CandidateSet], image_shape: tuple[int, int],
                max_restarts: int = 64, seed: int = 0) -> tuple[Image, Selector]:
    """Greedy variance-minimizing image reconstruction.

    A random non-empty candidate set seeds the image; for each of its
    candidates (capped at ``max_restarts``) the greedy pass repeatedly
    takes the unprocessed cycle with the largest overlap into decided
    pixels and selects its candidate with the smallest mean squared
    discrepancy on that overlap, updating pixels to the running mean of
    their selections. The restart with the smallest summed per-pixel
    variance wins; final pixel values are the rounded means, with
    never-covered pixels interpolated from neighbors. Cycles whose
    candidate set is empty are skipped.
    """
    state = _GreedyState(sets, image_shape)
    nonempty = np.flatnonzero(~state.empty)
    if len(nonempty) == 0:
        raise ReconstructionError("all candidate sets are empty")
    rng = np.random.default_rng(seed)
    seed_cycle = int(rng.choice(nonempty))
    n_seed = min(len(state.values[seed_cycle]), max_restarts)

    best = None
    for c in range(n_seed):
        choices, sigma, pix_sum, pix_cnt = state.run(seed_cycle, c)
        if best is None or sigma < best[1]:
            best = (choices, sigma, pix_sum, pix_cnt)
    choices, sigma, pix_sum, pix_cnt = best
    h, w = image_shape
    covered = (pix_cnt > 0).reshape(h, w)
    mean = np.zeros(h * w)
    mean[pix_cnt > 0] = pix_sum[pix_cnt > 0] / pix_cnt[pix_cnt > 0]
    mean = _fill_empty(mean.reshape(h, w), covered)
    return Image(_round_half_up(mean)), Selector(choices=choices,
                                                 objective=sigma)


def selector_objective(sets: list[CandidateSet], selector: Selector,
                       image_shape: tuple[int, int]) -> float:
    """Recompute the summed per-pixel variance of a selector's choices."""
    h, w = image_shape
    per_pixel: dict[int, list[float]] = {}
    for cs, c in zip(sets, selector.choices):
        if c < 0:
            continue
        inside = cs.region[:, 0] >= 0
        pids = cs.region[inside, 0] * w + cs.region[inside, 1]
        vals = cs.candidates[c][inside]
        for p, v in zip(pids, vals):
            per_pixel.setdefault(int(p), []).append(float(v))
    total = 0.0
    for vals in per_pixel.values():
        a = np.asarray(vals)
        total += float(np.mean(a * a) - np.mean(a) ** 2)
    return total


def average_baseline(sets: list[CandidateSet],
                     image_shape: tuple[int, int]) -> Image:
    """Comparison baseline: each pixel is the mean over every candidate
    of every cycle covering it (no consistency selection at all)."""
    h, w = image_shape
    pix_sum = np.zeros(h * w)
    pix_cnt = np.zeros(h * w, dtype=np.int64)
    any_cand = False
    for cs in sets:
        n = len(cs.candidates)
        if n == 0:
            continue
        any_cand = True
        inside = cs.region[:, 0] >= 0
        pids = (cs.region[inside, 0] * w + cs.region[inside, 1]).astype(np.int64)
        np.add.at(pix_sum, pids, cs.candidates[:, inside].sum(axis=0,
                                                              dtype=np.float64))
        np.add.at(pix_cnt, pids, n)
    if not any_cand:
        raise ReconstructionError("all candidate sets are empty")
    covered = (pix_cnt > 0).reshape(h, w)
    mean = np.zeros(h * w)
    mean[pix_cnt > 0] = pix_sum[pix_cnt > 0] / pix_cnt[pix_cnt > 0]
    mean = _fill_empty(mean.reshape(h, w), covered)
    return Image(_round_half_up(mean))


def candidate_stats(features: np.ndarray, true_patches: np.ndarray,
                    template: PowerTemplate, grouping: GroupingConfig,
                    deltas=(0.1, 0.2, 0.5, 1.0)) -> list[dict]:
    """Candidate-quality table across distance thresholds.

    For each delta: mean per-group candidate count, mean minimal patch
    distance of a group's candidates to the genuine related pixels, the
    same two numbers for the intersected set, and the count of cycles
    left without any candidate. Patch distance is the mean absolute
    per-pixel difference.
    """
    uniq, _ = template.patch_index()
    uniq64 = uniq.astype(np.int64)
    rows = []
    for delta in deltas:
        g = replace(grouping, delta=float(delta))
        per_group = group_patch_hits(features, template, g)
        group_sizes, group_dmin = [], []
        inter_sizes, inter_dmin, empties = [], [], 0
        for j in range(len(features)):
            truth = true_patches[j].astype(np.int64)
            pids = None
            for hits_g in per_group:
                g_pids = hits_g[j]
                pids = g_pids if pids is None else np.intersect1d(
                    pids, g_pids, assume_unique=True)
                if len(g_pids):
                    dmin = np.abs(uniq64[g_pids] - truth).mean(axis=1).min()
                    group_sizes.append(len(g_pids))
                    group_dmin.append(float(dmin))
            if len(pids) == 0:
                empties += 1
                continue
            dmin = np.abs(uniq64[pids] - truth).mean(axis=1).min()
            inter_sizes.append(len(pids))
            inter_dmin.append(float(dmin))
        rows.append({
            "delta": float(delta),
            "mean_group_size": float(np.mean(group_sizes)) if group_sizes else 0.0,
            "mean_group_dmin": float(np.mean(group_dmin)) if group_dmin else float("nan"),
            "mean_intersection_size": float(np.mean(inter_sizes)) if inter_sizes else 0.0,
            "mean_intersection_dmin": float(np.mean(inter_dmin)) if inter_dmin else float("nan"),
            "empty_cycles": empties,
        })
    return rows


def write_template(template: PowerTemplate, path) -> None:
    """Write the PTPL binary template format."""
    nk = template.n_kernels
    with open(path, "wb") as fh:
        fh.write(PTPL_MAGIC)
        fh.write(struct.pack("<H", PTPL_VERSION))
        fh.write(struct.pack("<BB", template.kernel_size, nk))
        fh.write(struct.pack("<Q", template.n_entries))
        for k in range(nk):
            fh.write(struct.pack("<dd", float(template.kernel_means[k]),
                                 float(template.kernel_stds[k])))
        rec = np.zeros(template.n_entries,
                       dtype=[("px", "u1", (template.patch_len,)),
                              ("rho", "<f4", (nk,))])
        rec["px"] = template.patches
        rec["rho"] = template.features.astype("<f4")
        fh.write(rec.tobytes())


def read_template(path) -> PowerTemplate:
    """Read a PTPL file written by :func:`write_template`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PTPL_MAGIC:
            raise FormatError(f"{path}: bad template magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != PTPL_VERSION:
            raise FormatError(f"{path}: unsupported template version {version}")
        ksize, nk = struct.unpack("<BB", fh.read(2))
        (n_entries,) = struct.unpack("<Q", fh.read(8))
        stats = struct.unpack(f"<{2 * nk}d", fh.read(16 * nk))
        patch_len = ksize * (ksize + 1)
        rec = np.frombuffer(fh.read(), dtype=[("px", "u1", (patch_len,)),
                                              ("rho", "<f4", (nk,))])
    if len(rec) < n_entries:
        raise DataLengthError(f"{path}: template payload truncated")
    rec = rec[:n_entries]
    means = np.asarray(stats[0::2])
    stds = np.asarray(stats[1::2])
    return PowerTemplate(
        kernel_size=ksize,
        patches=rec["px"].copy(),
        features=rec["rho"].astype(np.float64),
        kernel_means=means,
        kernel_stds=stds,
    )
