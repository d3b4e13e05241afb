"""Scoring driver: pairs prediction and ground-truth JSONL files by QA id
and produces a metric report.

Record shapes (one JSON object per line): text answers carry ``text``
(ground truth may add ``references``), localization answers carry
``center`` plus ``category``, trajectories carry ``trajectory``. The
report groups metrics by family, reports text scores both raw and in
percent, and echoes the run configuration.
"""

from __future__ import annotations

import json
from pathlib import Path

from . import metrics as M

__all__ = [
    "IdMismatchError",
    "load_records",
    "evaluate_records",
    "build_report",
    "validate_report",
    "gt_records_from_pairs",
    "records_to_jsonl",
]

PR_THRESHOLDS = (1.0, 2.0, 4.0)
FAMILIES = ("localization", "text", "trajectory")


class IdMismatchError(ValueError):
    def __init__(self, missing: list[str], extra: list[str]):
        self.missing = missing
        self.extra = extra
        parts = []
        if missing:
            parts.append(f"ids missing from predictions: {', '.join(missing[:10])}")
            if len(missing) > 10:
                parts.append(f"... and {len(missing) - 10} more")
        if extra:
            parts.append(f"ids not in ground truth: {', '.join(extra[:10])}")
            if len(extra) > 10:
                parts.append(f"... and {len(extra) - 10} more")
        super().__init__("; ".join(parts))


def _record_kind(rec: dict) -> str:
    has_text = "text" in rec
    has_box = "center" in rec or "category" in rec
    has_traj = "trajectory" in rec
    if sum([has_text, has_box, has_traj]) != 1:
        raise ValueError(
            f"record {rec.get('id')!r} must have exactly one of "
            "text, center+category, trajectory"
        )
    if has_box and not ("center" in rec and "category" in rec):
        raise ValueError(f"record {rec.get('id')!r} needs both center and category")
    return "text" if has_text else ("localization" if has_box else "trajectory")


def load_records(path) -> dict[str, dict]:
    """Read a predictions or ground-truth JSONL file keyed by id."""
    out: dict[str, dict] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON at column {exc.colno}") from exc
        if "id" not in rec:
            raise ValueError(f"{path}:{lineno}: record has no id")
        if rec["id"] in out:
            raise ValueError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
        _record_kind(rec)
        out[rec["id"]] = rec
    if not out:
        raise ValueError(f"{path}: no records")
    return out


def evaluate_records(
    preds: dict[str, dict],
    gts: dict[str, dict],
    families: tuple[str, ...] = FAMILIES,
) -> tuple[dict, dict]:
    """Score aligned records; returns (metrics map, per-family sample counts)."""
    missing = sorted(set(gts) - set(preds))
    extra = sorted(set(preds) - set(gts))
    if missing or extra:
        raise IdMismatchError(missing, extra)

    boxes_p, boxes_g = [], []
    texts_p, texts_r = [], []
    trajs = []
    for qa_id in sorted(gts):
        gt = gts[qa_id]
        pred = preds[qa_id]
        kind = _record_kind(gt)
        if kind != _record_kind(pred):
            raise ValueError(f"record kind mismatch for id {qa_id!r}")
        if kind == "localization":
            boxes_p.append(M.BoxAnswer(tuple(pred["center"]), pred["category"]))
            boxes_g.append(M.BoxAnswer(tuple(gt["center"]), gt["category"]))
        elif kind == "text":
            refs = gt.get("references") or [gt["text"]]
            texts_p.append(pred["text"])
            texts_r.append(list(refs))
        else:
            trajs.append(
                (
                    M.Trajectory(tuple(map(tuple, pred["trajectory"]))),
                    M.Trajectory(tuple(map(tuple, gt["trajectory"]))),
                )
            )

    scores: dict[str, float] = {}
    counts = {"localization": len(boxes_g), "text": len(texts_p), "trajectory": len(trajs)}

    if "localization" in families and boxes_g:
        for k in PR_THRESHOLDS:
            scores[f"pr_at_{k:g}"] = M.pr_at_k(boxes_p, boxes_g, k)
            scores[f"pr_star_at_{k:g}"] = M.pr_star_at_k(boxes_p, boxes_g, k)

    if "text" in families and texts_p:
        bleu_scores = [M.bleu(p, r).aggregate for p, r in zip(texts_p, texts_r)]
        rouge_scores = [M.rouge_l(p, r) for p, r in zip(texts_p, texts_r)]
        scores["bleu"] = sum(bleu_scores) / len(bleu_scores)
        scores["rouge_l"] = sum(rouge_scores) / len(rouge_scores)
        scores["bleu_percent"] = 100.0 * scores["bleu"]
        scores["rouge_l_percent"] = 100.0 * scores["rouge_l"]
        if len(texts_p) >= 2:
            cid = M.cider(texts_p, texts_r)
            scores["cider"] = cid.raw
            scores["cider_rescaled"] = cid.rescaled
            scores["cider_rescaled_percent"] = 100.0 * cid.rescaled
        for n in (1, 2):
            try:
                scores[f"ngram_diversity_{n}"] = M.ngram_diversity(texts_p, n)
            except ValueError:
                pass

    if "trajectory" in families and trajs:
        ades, fdes = zip(*(M.ade_fde(p, g) for p, g in trajs))
        scores["ade"] = sum(ades) / len(ades)
        scores["fde"] = sum(fdes) / len(fdes)

    return scores, counts


def build_report(
    preds: dict[str, dict],
    gts: dict[str, dict],
    families: tuple[str, ...] = FAMILIES,
    config: dict | None = None,
) -> dict:
    scores, counts = evaluate_records(preds, gts, families)
    return {
        "metrics": scores,
        "n_samples": counts,
        "config": dict(config or {}),
    }


def validate_report(report: dict) -> None:
    """Check a report against the shipped JSON schema."""
    import jsonschema

    from .assets import schema_path

    schema = json.loads(schema_path("report.schema.json").read_text(encoding="utf-8"))
    jsonschema.validate(report, schema)


def gt_records_from_pairs(pairs_jsonl_path, grid) -> dict[str, dict]:
    """Turn a generated QA JSONL file into ground-truth records.

    Localization pairs become box records at the cell center (the final
    cell for trajectory-style answers), planning pairs become trajectory
    records, and everything else scores as text.
    """
    from .spatial import GridIndex, dequantize

    out: dict[str, dict] = {}
    for line in Path(pairs_jsonl_path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        pair = json.loads(line)
        gt = pair.get("structured_gt")
        rec: dict = {"id": pair["id"]}
        if pair["task"] == "planning":
            rec["trajectory"] = gt["trajectory"]
        elif pair["task"] in ("box_detection", "tracking", "box_prediction"):
            cell = gt["cell"] if "cell" in gt else gt["cells"][-1]
            rec["center"] = list(dequantize(GridIndex(*cell), grid))
            rec["category"] = gt["category"]
        else:
            rec["text"] = pair["answer"]
        out[pair["id"]] = rec
    return out


def records_to_jsonl(records: dict[str, dict]) -> str:
    lines = [
        json.dumps(records[k], sort_keys=True, separators=(",", ":"))
        for k in sorted(records)
    ]
    return "".join(line + "\n" for line in lines)
