"""End-to-end pruning run: capture, allocate, prune block by block, evaluate."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np

from . import allocate, calib, grouping, pruners
from .errors import ConfigError, FangError, FormatError, StageError
from .model import Checkpoint, ModelConfig, apply_head_mask, apply_neuron_mask, init_model, perplexity

log = logging.getLogger(__name__)

REPORT_SCHEMA = "fang-report"
REPORT_VERSION = 1
METHODS = ("obc", "flap", "fang-obc", "fang-flap")
PROPAGATION = ("sequential", "oneshot")
REFERENCE_CHECKPOINT = calib.DATA_DIR / "reference.fang"
BUILTIN = {
    "builtin:reference": REFERENCE_CHECKPOINT,
    "builtin:train": calib.TRAIN_CORPUS,
    "builtin:eval": calib.EVAL_CORPUS,
}

DEFAULTS = {
    "model": {
        "checkpoint": "builtin:reference",
        "init_seed": 0,
        **ModelConfig().to_dict(),
    },
    "calib": {"corpus": "builtin:train", "n_seqs": 8, "seq_len": 128, "seed": 0},
    "prune": {
        "sparsity": 0.3,
        "method": "fang-obc",
        "k_groups": 7,
        "tau": 9.0,
        "pca_dim": 64,
        "alloc": "fc",
        "reweight": "ours",
        "grouping": "fang",
        "shared_group": True,
        "damping": 0.01,
        "propagation": "sequential",
        "assignment": "exact",
        "seed": 0,
    },
    "eval": {"corpus": "builtin:eval", "window": 128, "max_tokens": 16384},
}


def resolve_path(value) -> Path:
    return BUILTIN.get(value, Path(value)) if isinstance(value, str) else Path(value)


def resolve_config(raw: Optional[dict] = None, overrides: Optional[dict] = None) -> dict:
    """Merge a partial config over the defaults and validate it.

    ``overrides`` uses ``"section.key"`` names and wins over ``raw``.
    """
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in (raw or {}).items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            cfg[section][key] = value
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if value is not None:
            cfg[section][key] = value
    _validate(cfg)
    return cfg


def _validate(cfg):
    p = cfg["prune"]
    if p["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    if p["alloc"] not in allocate.ALLOC_MODES:
        raise ConfigError(f"alloc must be one of {allocate.ALLOC_MODES}")
    if p["reweight"] not in grouping.REWEIGHT_MODES:
        raise ConfigError(f"reweight must be one of {grouping.REWEIGHT_MODES}")
    if p["grouping"] not in grouping.GROUPING_MODES:
        raise ConfigError(f"grouping must be one of {grouping.GROUPING_MODES}")
    if p["propagation"] not in PROPAGATION:
        raise ConfigError(f"propagation must be one of {PROPAGATION}")
    if p["assignment"] not in ("exact", "greedy"):
        raise ConfigError("assignment must be 'exact' or 'greedy'")
    sp = p["sparsity"]
    if not isinstance(sp, (int, float)) or not 0 <= sp < 2.0 / 3.0:
        raise ConfigError(f"sparsity {sp} must lie in [0, 2/3)")
    if int(p["k_groups"]) < 1 or int(p["pca_dim"]) < 1:
        raise ConfigError("k_groups and pca_dim must be positive")
    if p["reweight"] in ("ours", "reverse") and not p["tau"] > 0:
        raise ConfigError("tau must be positive")
    if p["damping"] < 0:
        raise ConfigError("damping must be nonnegative")
    c = cfg["calib"]
    if c["n_seqs"] < 1 or c["seq_len"] < 2:
        raise ConfigError("calibration needs n_seqs >= 1 and seq_len >= 2")


def load_checkpoint(model_cfg: dict) -> Checkpoint:
    if model_cfg.get("checkpoint"):
        return Checkpoint.load(resolve_path(model_cfg["checkpoint"]))
    fields = {k: v for k, v in model_cfg.items() if k not in ("checkpoint", "init_seed")}
    return init_model(ModelConfig.from_dict(fields), seed=model_cfg["init_seed"])


def prunable_params(ckpt: Checkpoint) -> int:
    return sum(sum(ckpt.block_params(l).values()) for l in range(ckpt.config.n_layers))


def carry_counts(fractions, totals, cap_offset: int = 1) -> list[int]:
    """Round ``fractions * totals`` block by block, carrying the rounding error
    forward so the running total never drifts by more than half a unit."""
    counts, want, got = [], 0.0, 0
    for f, n in zip(fractions, totals):
        want += f * n
        c = int(math.floor(want + 0.5 + 1e-9)) - got
        c = max(0, min(c, n - cap_offset))
        counts.append(c)
        got += c
    return counts


def neuron_counts(fractions, ckpt: Checkpoint, head_counts) -> list[int]:
    """FFN prune counts that absorb the head rounding in parameter units.

    Each block targets ``fraction * block_params`` removed parameters; whatever
    the head count over- or undershoots is taken from the neurons, and the
    neuron rounding error is carried to the next block.
    """
    counts, carry = [], 0.0
    for l, (f, nh) in enumerate(zip(fractions, head_counts)):
        bp = ckpt.block_params(l)
        per_head = bp["attn"] / ckpt.n_heads(l)
        per_neuron = bp["ffn"] / ckpt.n_ffn(l)
        want = (f * (bp["attn"] + bp["ffn"]) - nh * per_head) / per_neuron + carry
        c = max(0, min(int(math.floor(want + 0.5 + 1e-9)), ckpt.n_ffn(l) - 1))
        carry = want - c
        counts.append(c)
    return counts


class _Timer:
    def __init__(self):
        self.seconds = {}

    @contextmanager
    def __call__(self, stage):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[stage] = self.seconds.get(stage, 0.0) + time.perf_counter() - t0


@contextmanager
def _stage(name, layer=None):
    try:
        yield
    except StageError:
        raise
    except (FangError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        raise StageError(name, layer, exc) from exc


def _alpha_summary(alpha):
    if alpha is None:
        return None
    return {
        "diag_mean": float(np.mean(np.diag(alpha))),
        "min": float(alpha.min()),
        "max": float(alpha.max()),
    }


def make_plan(cfg, ckpt, captures, fc):
    sp = cfg["prune"]["sparsity"]
    weights = np.array([prunable_params_block(ckpt, l) for l in range(ckpt.config.n_layers)], dtype=np.float64)
    if sp == 0:
        return allocate.SparsityPlan(np.zeros(len(fc)), 0.0, "none", np.asarray(fc), weights)
    mode = cfg["prune"]["alloc"]
    if mode == "taylor":
        plan = allocate.taylor_allocation(captures, sp, weights)
        plan.fc = np.asarray(fc)
        return plan
    return allocate.sparsity_plan(fc, sp, mode, weights)


def prunable_params_block(ckpt, l):
    return sum(ckpt.block_params(l).values())


def run_prune(cfg: dict, return_groupings: bool = False):
    """Execute a full run for a resolved config.

    Returns ``(pruned checkpoint, report dict)`` and, when asked, the
    per-layer groupings.
    """
    timer = _Timer()
    p = cfg["prune"]
    method = p["method"]
    base = method.split("-")[-1]
    fang = method.startswith("fang")
    with _stage("load"), timer("load"):
        dense = load_checkpoint(cfg["model"])
        corpus = calib.load_corpus(resolve_path(cfg["calib"]["corpus"]))
        cset = calib.sample_calibration(
            corpus, cfg["calib"]["n_seqs"], cfg["calib"]["seq_len"], cfg["calib"]["seed"], str(cfg["calib"]["corpus"])
        )
    L = dense.config.n_layers
    with _stage("capture"), timer("capture"):
        captures = calib.capture_all(dense, cset)
    with _stage("allocate"), timer("allocate"):
        fc = np.array([allocate.functional_complexity(c.block_in, c.block_out) for c in captures])
        plan = make_plan(cfg, dense, captures, fc)
        head_counts = carry_counts(plan.per_block, [dense.n_heads(l) for l in range(L)])
        ffn_counts = neuron_counts(plan.per_block, dense, head_counts)

    ckpt = dense
    layers, groupings = [], []
    sequential = p["propagation"] == "sequential"
    for l in range(L):
        entry = {
            "layer": l,
            "sp_target": float(plan.per_block[l]),
            "fc": float(fc[l]),
            "heads_total": dense.n_heads(l),
            "neurons_total": dense.n_ffn(l),
        }
        if sequential and l > 0 and (head_counts[l - 1] or ffn_counts[l - 1]):
            with _stage("refresh", l), timer("refresh"):
                captures = calib.refresh_forward(ckpt, cset, captures, l)
        cap = captures[l]
        with _stage("prune_heads", l), timer("prune_heads"):
            hres = None
            if head_counts[l]:
                hres = pruners.prune_heads(
                    ckpt.layer(l, "wo"), cap.attn_out, dense.config.d_head, base,
                    n_prune=head_counts[l], damping=p["damping"], name=f"layer {l} W_o",
                )
                ckpt = ckpt.replace({f"layers.{l}.wo": hres.new_weights})
                ckpt = apply_head_mask(ckpt, l, hres.mask, hres.bias)
        entry["heads_pruned"] = int(head_counts[l])
        entry["pruned_heads"] = [] if hres is None else np.flatnonzero(hres.mask).tolist()
        entry["head_error_before"] = 0.0 if hres is None else hres.recon_error_before
        entry["head_error_after"] = 0.0 if hres is None else hres.recon_error_after
        if sequential and hres is not None:
            with _stage("refresh", l), timer("refresh"):
                captures = calib.refresh_forward(ckpt, cset, captures, l)
                cap = captures[l]

        fres, grp = None, None
        if ffn_counts[l]:
            if fang:
                with _stage("grouping", l), timer("grouping"):
                    grp = grouping.build_grouping(
                        cap.ffn_input, cap.hidden, cap.grad, int(p["k_groups"]),
                        tau=float(p["tau"]), pca_dim=int(p["pca_dim"]), reweight=p["reweight"],
                        mode=p["grouping"], shared=bool(p["shared_group"]),
                        seed=int(p["seed"]) * 1000 + l, exact=p["assignment"] == "exact",
                    )
            with _stage("prune_ffn", l), timer("prune_ffn"):
                w_down = ckpt.layer(l, "w_down")
                if fang:
                    fres = pruners.fang_prune_ffn(
                        w_down, cap.hidden, grp, base, n_prune=ffn_counts[l], damping=p["damping"], name=f"layer {l} W_down"
                    )
                elif base == "obc":
                    fres = pruners.obc_variant_prune(
                        w_down, pruners.hessian(cap.hidden), n_prune=ffn_counts[l], damping=p["damping"], name=f"layer {l} W_down"
                    )
                else:
                    fres = pruners.flap_prune(w_down, cap.hidden, n_prune=ffn_counts[l])
                ckpt = ckpt.replace({f"layers.{l}.w_down": fres.new_weights})
                ckpt = apply_neuron_mask(ckpt, l, fres.mask, fres.bias)
        groupings.append(grp)
        entry["neurons_pruned"] = 0 if fres is None else fres.n_pruned
        entry["pruned_neurons"] = [] if fres is None else np.flatnonzero(fres.mask).tolist()
        entry["ffn_error_before"] = 0.0 if fres is None else fres.recon_error_before
        entry["ffn_error_after"] = 0.0 if fres is None else fres.recon_error_after
        entry["shortfall"] = 0 if fres is None else fres.shortfall
        entry["groups"] = [] if fres is None else fres.groups
        if grp is not None:
            entry["grouping"] = {
                "mode": grp.mode,
                "solver": grp.solver,
                "k": grp.k,
                "group_size": len(grp.groups[0]) if grp.groups else 0,
                "shared_size": int(len(grp.shared)),
                "shared": np.asarray(grp.shared).tolist(),
                "cluster_counts": np.asarray(grp.counts).tolist(),
                "alpha": _alpha_summary(grp.alpha),
            }
        bp_dense = prunable_params_block(dense, l)
        entry["realized_sparsity"] = 1.0 - prunable_params_block(ckpt, l) / bp_dense
        layers.append(entry)

    with _stage("eval"), timer("eval"):
        ev = calib.load_corpus(resolve_path(cfg["eval"]["corpus"]))[: int(cfg["eval"]["max_tokens"])]
        window = int(cfg["eval"]["window"])
        ppl_dense = perplexity(dense, ev, window)
        ppl_pruned = perplexity(ckpt, ev, window)

    pd, pp = prunable_params(dense), prunable_params(ckpt)
    report = {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "config": cfg,
        "summary": {
            "target_sparsity": float(p["sparsity"]),
            "realized_sparsity": 1.0 - pp / pd,
            "prunable_params_dense": pd,
            "prunable_params_pruned": pp,
            "params_dense": dense.num_params(),
            "params_pruned": ckpt.num_params(),
            "param_reduction": 1.0 - ckpt.num_params() / dense.num_params(),
            "heads_pruned": int(sum(head_counts)),
            "neurons_pruned": int(sum(e["neurons_pruned"] for e in layers)),
            "ppl_dense": ppl_dense,
            "ppl_pruned": ppl_pruned,
            "eval_tokens": int(ev.size),
            "calib_tokens": int(captures[0].n_tokens),
        },
        "plan": plan.to_dict(),
        "layers": layers,
        "timing": {k: round(v, 6) for k, v in timer.seconds.items()},
    }
    if return_groupings:
        return ckpt, report, groupings
    return ckpt, report


def random_mask_control(ckpt: Checkpoint, report: dict, seed: int) -> Checkpoint:
    """Prune the same number of heads and neurons per layer as ``report`` but
    with uniformly random masks and no compensation."""
    rng = np.random.default_rng(seed)
    for entry in report["layers"]:
        l = entry["layer"]
        for count, total, apply in (
            (entry["heads_pruned"], ckpt.n_heads(l), apply_head_mask),
            (entry["neurons_pruned"], ckpt.n_ffn(l), apply_neuron_mask),
        ):
            if count:
                mask = np.zeros(total, dtype=bool)
                mask[rng.choice(total, size=count, replace=False)] = True
                ckpt = apply(ckpt, l, mask)
    return ckpt


def report_without_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=False) + "\n"


def write_outputs(out_dir, ckpt: Checkpoint, report: dict, groupings=None) -> dict:
    """Write ``pruned.fang``, ``report.json`` and ``groupings.json``; removes
    whatever was written if any step fails."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "checkpoint": out / "pruned.fang",
        "report": out / "report.json",
    }
    if groupings is not None:
        paths["groupings"] = out / "groupings.json"
    written = []
    try:
        ckpt.save(paths["checkpoint"])
        written.append(paths["checkpoint"])
        paths["report"].write_text(dump_report(report))
        written.append(paths["report"])
        if groupings is not None:
            payload = [None if g is None else g.to_dict() for g in groupings]
            paths["groupings"].write_text(json.dumps(payload) + "\n")
            written.append(paths["groupings"])
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return paths


def load_report(path) -> dict:
    try:
        report = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(report, dict) or report.get("schema") != REPORT_SCHEMA:
        raise FormatError(f"{path}: not a {REPORT_SCHEMA} document")
    if report.get("version") != REPORT_VERSION:
        raise FormatError(f"{path}: report version {report.get('version')!r} unsupported (expected {REPORT_VERSION})")
    for key in ("config", "summary", "layers"):
        if key not in report:
            raise FormatError(f"{path}: report v{REPORT_VERSION} is missing {key!r}")
    return report


def config_delta(cfg: dict) -> dict:
    """Flattened ``section.key -> value`` entries that differ from defaults."""
    delta = {}
    for section, values in cfg.items():
        for key, value in values.items():
            if DEFAULTS.get(section, {}).get(key, object()) != value:
                delta[f"{section}.{key}"] = value
    return delta
