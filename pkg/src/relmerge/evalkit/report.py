"""Evaluation reports and the merge-variant ablation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError
from .bench import GenSettings, Generated, generate, object_crops, sample_seed
from .metrics import attention_overlap, image_match_score, text_match_score

METRICS = ("S_object_relevance", "text_match", "image_match", "attention_overlap")
AGGREGATE = "mean"

# variant name -> (checkpoint key, merge mode, restrict streams to boxes)
ABLATION_VARIANTS = {
    "Uniformly Add": ("uniform", "uniform", False),
    "Locally Add": ("uniform", "uniform", True),
    "+Image Weight": ("weighted", "weighted", False),
    "+Text Weight": ("text", "text", False),
    "+Image & Text": ("trained", "trained", False),
}


@dataclass
class EvalReport:
    """Rows of named metric values. The aggregate is the per-column mean of the rows.

    CSV layout: header ``name,<metric>...``; one line per row; a final line
    named ``mean`` holding the aggregate. Missing values are empty cells.
    """

    rows: list = field(default_factory=list)      # dicts with "name" plus metric values
    columns: tuple = METRICS

    def add(self, name: str, **values):
        unknown = set(values) - set(self.columns)
        if unknown:
            raise ValueError(f"unknown report columns {sorted(unknown)}")
        self.rows.append({"name": name, **values})

    def aggregate(self) -> dict:
        out = {}
        for c in self.columns:
            vals = [r[c] for r in self.rows if r.get(c) is not None]
            out[c] = float(np.mean(vals)) if vals else None
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("name",) + tuple(self.columns))
        for r in self.rows + [{"name": AGGREGATE, **self.aggregate()}]:
            w.writerow([r["name"]] + ["" if r.get(c) is None else repr(float(r[c])) for c in self.columns])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot read report {path}: {e}") from e
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if not header or header[0] != "name":
            raise DataError(f"{path}: not a report (header {header})")
        rep = cls(columns=tuple(header[1:]))
        for line in reader:
            if not line or line[0] == AGGREGATE:
                continue
            rep.rows.append({"name": line[0], **{c: (float(v) if v != "" else None)
                                                 for c, v in zip(header[1:], line[1:])}})
        return rep


def bench_metrics(gen: Generated, items, cfg, embedder) -> dict:
    """Per-job text/image match and mean pairwise attention overlap (when recorded).

    Overlap is NaN for single-object jobs.
    """
    crops = object_crops(gen.images(cfg), items)
    text = [text_match_score(cr, [o.phrase for o in it.spec.objects], embedder) for cr, it in zip(crops, items)]
    image = [image_match_score(cr, it.refs, embedder) for cr, it in zip(crops, items)]
    out = {"text_match": np.array(text), "image_match": np.array(image)}
    if gen.relevance:
        out["attention_overlap"] = np.array([mean_pair_overlap(m, len(it.spec.objects))
                                             if len(it.spec.objects) > 1 else np.nan
                                             for m, it in zip(gen.relevance, items)])
    return out


def column_means(metrics: dict, sl=slice(None)) -> dict:
    """Column means over a job slice; all-NaN columns become missing values."""
    out = {}
    for k, v in metrics.items():
        v = v[sl]
        out[k] = float(np.nanmean(v)) if np.any(~np.isnan(v)) else None
    return out


def mean_pair_overlap(maps, n_objects: int) -> float:
    """Average overlap over object pairs, steps and layers; ``maps`` is (..., M, N)."""
    vals = [attention_overlap(maps[..., a, :], maps[..., b, :]).mean()
            for a in range(n_objects) for b in range(a + 1, n_objects)]
    if not vals:
        raise ValueError("overlap needs at least two objects")
    return float(np.mean(vals))


def run_merge_ablation(model_ckpts: dict, bench, out=None, *, cfg_loader, sched, embedder,
                       n_samples: int = 5, seed: int = 0, settings: GenSettings | None = None,
                       variants=None) -> EvalReport:
    """One report row per merge variant.

    ``model_ckpts`` maps checkpoint keys (uniform / weighted / text / trained)
    to paths; ``cfg_loader(path) -> (params, cfg)`` reads one.
    """
    settings = settings or GenSettings()
    variants = list(variants or ABLATION_VARIANTS)
    report = EvalReport(columns=("text_match", "image_match", "attention_overlap"))
    jobs = [it for it in bench for _ in range(n_samples)]
    seeds = [sample_seed(seed, it.index, k) for it in bench for k in range(n_samples)]
    for name in variants:
        if name not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant {name!r}")
        key, mode, local = ABLATION_VARIANTS[name]
        path = model_ckpts.get(key)
        if path is None or not Path(path).exists():
            raise ConfigError(f"variant {name!r} needs a {key!r} checkpoint, got {path!r}")
        params, cfg = cfg_loader(path)
        s = GenSettings(**{**settings.__dict__, "merge_mode": mode})
        gen = generate(params, cfg, sched, jobs, seeds, s, local=local, record=True)
        m = bench_metrics(gen, jobs, cfg, embedder)
        report.add(name, **column_means(m))
    if out is not None:
        report.to_csv(out)
    return report
