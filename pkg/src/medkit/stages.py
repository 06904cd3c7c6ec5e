"""Batch stages shared by the CLI subcommands and ``medkit run``.

Every stage takes resolved parameters, writes its primary outputs and
returns a stats dict. Stages raise :class:`StageError` (or a module error)
on failure; the caller records it in the run report.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import curation, drr, maskops, packing, volume
from .doceval import scoring, tables, textmetrics
from .jsonl import JsonlError, read_jsonl, write_json, write_jsonl


class StageError(RuntimeError):
    pass


def _need(params: dict, key: str):
    if params.get(key) is None:
        raise StageError(f"missing required parameter {key!r}")
    return params[key]


def _input(params: dict, key: str = "input") -> Path:
    path = Path(_need(params, key))
    if not path.is_file():
        raise StageError(f"input not found: {path}")
    return path


def _drops_path(out: Path) -> Path:
    return out.with_name(out.stem + ".drops.jsonl")


def _write_decisions(out: Path, rows: List[dict]) -> dict:
    write_jsonl(out, rows)
    drops = [r for r in rows if r["decision"] == "drop"]
    write_jsonl(_drops_path(out), drops)
    return {"records": len(rows), "kept": len(rows) - len(drops), "dropped": len(drops),
            "outputs": [str(out), str(_drops_path(out))]}


# -- curation ---------------------------------------------------------------

def _filter_one(rec: dict) -> curation.Decision:
    decisions = []
    if "token_count" in rec:
        decisions.append(curation.filter_text(curation.TextRecord(str(rec.get("id")), rec.get("text", ""),
                                                                  int(rec["token_count"]))))
    if "width" in rec and "height" in rec:
        decisions.append(curation.filter_image(curation.ImageMeta(str(rec.get("id")), int(rec["width"]),
                                                                  int(rec["height"]))))
    if not decisions:
        return curation.Decision(False, "no_filterable_fields")
    for d in decisions:
        if not d.keep:
            return d
    return curation.Decision(True)


def stage_filter(params: dict, jobs: int = 1) -> dict:
    src = _input(params)
    records = read_jsonl(src)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            decisions = list(pool.map(_filter_one, records))
    else:
        decisions = [_filter_one(r) for r in records]
    rows = [{**r, "decision": d.label, "reason": d.reason} for r, d in zip(records, decisions)]
    return _write_decisions(Path(params["output"]), rows)


def _record_hashes(rec: dict, base: Path):
    if "text_hash" in rec:
        th = str(rec["text_hash"])
    elif "text" in rec:
        th = curation.text_hash(str(rec["text"]))
    else:
        raise StageError(f"record {rec.get('id')!r} has neither text nor text_hash")
    ih = rec.get("image_hash")
    if ih is None and rec.get("image_path"):
        img = Path(rec["image_path"])
        img = img if img.is_absolute() else base / img
        try:
            ih = curation.fnv1a_64(img.read_bytes())
        except OSError as exc:
            raise StageError(f"record {rec.get('id')!r}: cannot read image: {exc}") from None
    return th, (None if ih is None else str(ih))


def stage_dedup(params: dict, jobs: int = 1) -> dict:
    src = _input(params)
    records = read_jsonl(src)
    keyed = []
    for i, r in enumerate(records):
        th, ih = _record_hashes(r, src.parent)
        keyed.append((str(i), th, ih))
    _, dropped = curation.dedup(keyed)
    dropped = set(dropped)
    rows = []
    for i, r in enumerate(records):
        dup = str(i) in dropped
        rows.append({**r, "decision": "drop" if dup else "keep", "reason": "duplicate" if dup else None})
    return _write_decisions(Path(params["output"]), rows)


def stage_tags(params: dict, jobs: int = 1) -> dict:
    records = read_jsonl(_input(params))
    rows = []
    for r in records:
        rep = curation.validate_tags(curation.TagRecord(str(r.get("modality")), str(r.get("task")),
                                                        str(r.get("region"))))
        rows.append({**r, "decision": "keep" if rep.passed else "drop",
                     "reason": None if rep.passed else ",".join(c for c, _ in rep.failures)})
    return _write_decisions(Path(params["output"]), rows)


def stage_cot(params: dict, jobs: int = 1) -> dict:
    records = read_jsonl(_input(params))
    rows = []
    for r in records:
        try:
            rec = curation.parse_cot_record(str(r.get("text", "")))
        except curation.CoTParseError as exc:
            rows.append({"id": r.get("id"), "decision": "drop", "reason": exc.code})
        else:
            rows.append({"id": r.get("id"), "decision": "keep", "reason": None, "record": curation.cot_to_dict(rec)})
    return _write_decisions(Path(params["output"]), rows)


# -- packing ----------------------------------------------------------------

def stage_pack(params: dict, jobs: int = 1) -> dict:
    src = _input(params)
    max_len = int(_need(params, "max_len"))
    samples = []
    for line_no, rec in enumerate(read_jsonl(src), 1):
        try:
            samples.append(packing.TokenSample.from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise JsonlError(src, line_no, f"bad sample: {exc}") from None
    plan = packing.pack_samples(samples, max_len)
    stats = packing.utilization(plan)
    out = Path(params["output"])
    write_json(out, {**plan.to_dict(), "stats": stats.to_dict()})
    return {**stats.to_dict(), "samples": len(samples), "seg_entries": len(plan.index_table), "outputs": [str(out)]}


# -- DRR --------------------------------------------------------------------

def load_projection_config(source) -> drr.ProjectionConfig:
    if source is None:
        return drr.ProjectionConfig()
    if isinstance(source, dict):
        return drr.ProjectionConfig.from_dict(source)
    try:
        return drr.ProjectionConfig.from_dict(json.loads(Path(source).read_text()))
    except OSError as exc:
        raise StageError(f"cannot read projection config: {exc}") from None


def load_labels(header_path) -> drr.LabelVolume3D:
    v = volume.load_volume(header_path)
    if np.any(v.voxels < 0):
        raise StageError("label volume contains negative class ids")
    return drr.LabelVolume3D.from_array(v.voxels, v.header.spacing_mm)


def stage_drr(params: dict, jobs: int = 1) -> dict:
    cfg = load_projection_config(params.get("projection"))
    vol_path = _input(params, "volume")
    try:
        vol = volume.load_volume(vol_path)
    except volume.VolumeError as exc:
        raise StageError(f"volume {vol_path}: {exc}") from None
    att = volume.hu_to_attenuation(vol, float(params.get("mu_water", volume.DEFAULT_MU_WATER)))
    rad = drr.project_at_angle(att, cfg)
    prefix = Path(params["out_prefix"])
    prefix.parent.mkdir(parents=True, exist_ok=True)
    fmt = params.get("format", "pgm")
    img_path = prefix.with_name(prefix.name + "." + fmt)
    drr.save_image(drr.to_display(rad, invert=bool(params.get("invert", True))), img_path)
    int_path = prefix.with_name(prefix.name + ".integrals.npy")
    np.save(int_path, rad.integrals)
    outputs = [str(img_path), str(int_path)]
    stats = {"width": rad.width, "height": rad.height,
             "integral_min": float(rad.integrals.min()), "integral_max": float(rad.integrals.max()),
             "transmitted_min": float(rad.transmitted.min()), "transmitted_max": float(rad.transmitted.max())}
    if params.get("labels"):
        lab_path = _input(params, "labels")
        try:
            lv = load_labels(lab_path)
        except volume.VolumeError as exc:
            raise StageError(f"labels {lab_path}: {exc}") from None
        masks = drr.project_labels(lv, cfg, paired=rad)
        boxes = drr.boxes_from_labels(masks)
        mask_path = prefix.with_name(prefix.name + ".masks.jsonl")
        box_path = prefix.with_name(prefix.name + ".boxes.jsonl")
        write_jsonl(mask_path, maskops.masks_to_rle(masks))
        write_jsonl(box_path, [b.to_dict() for b in boxes])
        outputs += [str(mask_path), str(box_path)]
        stats["boxes"] = len(boxes)
    stats["outputs"] = outputs
    return stats


# -- metrics ----------------------------------------------------------------

def stage_metrics(params: dict, jobs: int = 1) -> dict:
    kind = _need(params, "kind")
    rows = read_jsonl(_input(params))
    items = []
    if kind == "seg":
        for r in rows:
            p = maskops.rle_decode(maskops.RleMask.from_dict(r["pred"]))
            g = maskops.rle_decode(maskops.RleMask.from_dict(r["gold"]))
            items.append({"id": r.get("id"), "dice": maskops.dice_coefficient(p, g), "iou": maskops.mask_iou(p, g)})
        summary = {"items": len(items),
                   "mean_dice": float(np.mean([i["dice"] for i in items])) if items else 0.0,
                   "mean_iou": float(np.mean([i["iou"] for i in items])) if items else 0.0}
    elif kind == "det":
        thresh = float(params.get("thresh", 0.5))
        correct = total = 0
        for r in rows:
            pred = [drr.LabeledBox.from_dict(b) for b in r.get("pred", [])]
            gold = [drr.LabeledBox.from_dict(b) for b in r.get("gold", [])]
            hits = len(maskops.match_boxes(pred, gold, thresh))
            correct += hits
            total += len(pred)
            items.append({"id": r.get("id"), "precision": hits / len(pred) if pred else 0.0,
                          "correct": hits, "predicted": len(pred)})
        summary = {"items": len(items), "thresh": thresh, "micro_precision": correct / total if total else 0.0,
                   "mean_precision": float(np.mean([i["precision"] for i in items])) if items else 0.0}
    else:
        raise StageError(f"unknown metrics kind {kind!r}")
    out = Path(params["output"])
    write_json(out, {"summary": summary, "items": items})
    return {**summary, "outputs": [str(out)]}


# -- document evaluation ----------------------------------------------------

def _by_id(rows: List[dict], what: str) -> Dict[str, dict]:
    out = {}
    for r in rows:
        if "id" not in r:
            raise StageError(f"{what} record without id")
        out[str(r["id"])] = r
    return out


def _table(rec: Optional[dict]) -> tables.LabTable:
    if not rec:
        return tables.LabTable()
    text = rec.get("table_markdown", rec.get("text", ""))
    try:
        return tables.parse_markdown_table(str(text))
    except tables.TableParseError:
        return tables.LabTable()


def evaluate(task: str, pred_rows: List[dict], gold_rows: List[dict], judge=None, jobs: int = 1) -> dict:
    pred = _by_id(pred_rows, "prediction")
    gold = _by_id(gold_rows, "gold")
    ids = list(gold)
    missing = [i for i in ids if i not in pred]
    base = {"task": task, "items": len(ids), "missing_predictions": len(missing)}
    if task == "ltr-full":
        per_doc = []
        parse_failures = 0
        for i in ids:
            g = _table(gold[i])
            p = _table(pred.get(i))
            if i in pred and not p.rows:
                parse_failures += 1
            per_doc.append((p, g))
        fs = scoring.score_full_parse(per_doc)
        return {**base, **fs.to_dict(), "unparsed_predictions": parse_failures,
                "per_document_f1": {i: d[2] for i, d in zip(ids, fs.per_doc)}}
    if task == "ltr-complex":
        fs = scoring.score_complex_qa([(pred.get(i), gold[i]) for i in ids])
        return {**base, **fs.to_dict()}
    if task == "ltr-simple":
        hits = []
        for i in ids:
            p = pred.get(i)
            ptext = "" if p is None else str(p.get("text", p.get("answer", "")))
            hits.append(scoring.score_simple_qa(ptext, str(gold[i].get("text", gold[i].get("answer", ""))),
                                                judge=judge, question=gold[i].get("question")))
        return {**base, "accuracy": sum(hits) / len(hits) if hits else 0.0, "correct": sum(hits)}
    if task == "gmd":
        if judge is None:
            raise StageError("gmd scoring needs a judge command")
        payloads = [{"question": gold[i].get("question"),
                     "prediction": "" if i not in pred else str(pred[i].get("text", "")),
                     "gold": str(gold[i].get("text", ""))} for i in ids]
        scores = scoring.judge_many(judge, payloads, jobs)
        return {**base, "mean_score": sum(scores) / len(scores) if scores else 0.0}
    if task == "report-metrics":
        cands = [textmetrics.tokenize("" if i not in pred else str(pred[i].get("text", ""))) for i in ids]
        refs = [textmetrics.tokenize(str(gold[i].get("text", ""))) for i in ids]
        if not ids:
            raise StageError("empty corpus")
        rl = [textmetrics.rouge_l(c, r) for c, r in zip(cands, refs)]
        return {**base, "rouge_l": sum(rl) / len(rl), "cider": textmetrics.cider(cands, refs)}
    raise StageError(f"unknown eval task {task!r}")


def stage_eval(params: dict, jobs: int = 1) -> dict:
    task = _need(params, "task")
    result = evaluate(task, read_jsonl(_input(params, "pred")), read_jsonl(_input(params, "gold")),
                      judge=params.get("judge"), jobs=jobs)
    out = Path(params["output"])
    write_json(out, result)
    summary = {k: v for k, v in result.items() if not isinstance(v, dict)}
    return {**summary, "outputs": [str(out)]}


STAGES: Dict[str, Callable[..., dict]] = {
    "filter": stage_filter,
    "dedup": stage_dedup,
    "tags": stage_tags,
    "cot": stage_cot,
    "pack": stage_pack,
    "drr": stage_drr,
    "metrics": stage_metrics,
    "eval": stage_eval,
}

DEFAULT_OUTPUT = {
    "filter": "{name}.jsonl",
    "dedup": "{name}.jsonl",
    "tags": "{name}.jsonl",
    "cot": "{name}.jsonl",
    "pack": "{name}.plan.json",
    "metrics": "{name}.metrics.json",
    "eval": "{name}.eval.json",
}
