"""Report and manifest emission.

Compression reports serialize to schema-versioned JSON or to CSV with
the fixed column set (layer-id, b_w, b_a, p_l, P_l, MACs, BOPs). Both
forms re-parse into an equal CompressionReport; floats are written in
shortest round-trip notation so emitted artifacts are byte-stable.

The run manifest is the provenance record every checkpoint and report
points back to: config snapshot, dataset fingerprint, seed, code
version, timestamps, output paths. Its id hashes only the
run-determining inputs, never the timestamps.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

from . import __version__
from .config import config_to_dict
from .errors import DataError, FormatError
from .metrics import CompressionReport, LayerReport

REPORT_SCHEMA_VERSION = 1
REPORT_FORMATS = ("json", "csv")
CSV_COLUMNS = ("layer-id", "b_w", "b_a", "p_l", "P_l", "MACs", "BOPs")


def gmacs_str(macs) -> str:
    """MAC count as giga-MACs, 3 decimals (table presentation)."""
    return f"{macs / 1e9:.3f}"


def gbops_str(bops) -> str:
    """BOP count as giga-BOPs, 2-decimal fixed point (table presentation)."""
    return f"{bops / 1e9:.2f}"


def report_to_dict(report) -> dict:
    return {
        "schema": REPORT_SCHEMA_VERSION,
        "accuracy": report.accuracy,
        "totals": {"macs": report.total_macs, "bops": report.total_bops},
        "ratios": {"macs": report.mac_ratio, "bops": report.bop_ratio},
        "rows": [{"layer-id": r.layer_id,
                  "b_w": r.weight_bits,
                  "b_a": r.act_bits,
                  "p_l": r.prune_out,
                  "P_l": r.prune_combined,
                  "MACs": r.macs,
                  "BOPs": r.bops} for r in report.rows],
    }


def report_from_dict(d) -> CompressionReport:
    try:
        schema = d["schema"]
        if schema > REPORT_SCHEMA_VERSION:
            raise FormatError(f"report schema {schema} is newer than this "
                              f"build reads (up to {REPORT_SCHEMA_VERSION})")
        rows = [LayerReport(layer_id=r["layer-id"],
                            weight_bits=r["b_w"],
                            act_bits=r["b_a"],
                            prune_out=r["p_l"],
                            prune_combined=r["P_l"],
                            macs=r["MACs"],
                            bops=r["BOPs"]) for r in d["rows"]]
        return CompressionReport(rows=rows,
                                 total_macs=d["totals"]["macs"],
                                 total_bops=d["totals"]["bops"],
                                 mac_ratio=d["ratios"]["macs"],
                                 bop_ratio=d["ratios"]["bops"],
                                 accuracy=d["accuracy"]).validate()
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed report structure: {exc!r}") from None


def render_report(report, format) -> str:
    """Serialize a report; deterministic for equal reports."""
    report.validate()
    if format == "json":
        return json.dumps(report_to_dict(report), sort_keys=True,
                          indent=2) + "\n"
    if format == "csv":
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            w.writerow([r.layer_id, repr(float(r.weight_bits)),
                        repr(float(r.act_bits)), repr(float(r.prune_out)),
                        repr(float(r.prune_combined)), repr(float(r.macs)),
                        repr(float(r.bops))])
        w.writerow(["total", "", "", "", "",
                    repr(float(report.total_macs)),
                    repr(float(report.total_bops))])
        out.write(f"# schema={REPORT_SCHEMA_VERSION} "
                  f"mac-ratio={report.mac_ratio!r} "
                  f"bop-ratio={report.bop_ratio!r} "
                  f"accuracy={report.accuracy!r}\n")
        return out.getvalue()
    raise DataError(f"unknown report format {format!r}; "
                    f"expected one of {', '.join(REPORT_FORMATS)}")


def parse_report(text, format) -> CompressionReport:
    if format == "json":
        try:
            return report_from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed report json: {exc}") from None
    if format != "csv":
        raise DataError(f"unknown report format {format!r}; "
                        f"expected one of {', '.join(REPORT_FORMATS)}")
    lines = text.splitlines()
    meta = {}
    rows_text = []
    for line in lines:
        if line.startswith("#"):
            for part in line[1:].split():
                key, _, value = part.partition("=")
                meta[key] = value
        elif line.strip():
            rows_text.append(line)
    try:
        parsed = list(csv.reader(rows_text))
        if not parsed or tuple(parsed[0]) != CSV_COLUMNS:
            raise FormatError(
                f"bad csv header: expected {', '.join(CSV_COLUMNS)}")
        body, total = parsed[1:-1], parsed[-1]
        if total[0] != "total":
            raise FormatError("csv report is missing its totals row")
        rows = [LayerReport(layer_id=r[0], weight_bits=float(r[1]),
                            act_bits=float(r[2]), prune_out=float(r[3]),
                            prune_combined=float(r[4]), macs=float(r[5]),
                            bops=float(r[6])) for r in body]
        return CompressionReport(
            rows=rows,
            total_macs=float(total[5]),
            total_bops=float(total[6]),
            mac_ratio=float(meta.get("mac-ratio", 1.0)),
            bop_ratio=float(meta.get("bop-ratio", 1.0)),
            accuracy=float(meta.get("accuracy", 0.0))).validate()
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed report csv: {exc!r}") from None


def emit_report(report, format, path):
    """Write a report file; returns the path."""
    text = render_report(report, format)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise DataError(f"cannot write report {path}: {exc}") from None
    return path


def load_report(path) -> CompressionReport:
    """Read a report file, inferring the format from the extension."""
    format = "csv" if str(path).endswith(".csv") else "json"
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_report(fh.read(), format)
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc}") from None


@dataclass
class RunManifest:
    """Provenance record; every emitted artifact names exactly one."""

    config: dict
    dataset_path: str
    dataset_hash: str
    seed: int
    code_version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: list = field(default_factory=list)

    @property
    def run_id(self) -> str:
        basis = json.dumps({"config": self.config,
                            "dataset": self.dataset_hash,
                            "seed": self.seed,
                            "version": self.code_version},
                           sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(basis.encode("utf-8")).hexdigest()[:16]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def start_manifest(config, dataset_path, dataset_hash) -> RunManifest:
    return RunManifest(config=config_to_dict(config),
                       dataset_path=str(dataset_path),
                       dataset_hash=dataset_hash,
                       seed=config.seed,
                       started=_now())


def save_manifest(manifest, path):
    manifest.finished = manifest.finished or _now()
    doc = {"run-id": manifest.run_id,
           "config": manifest.config,
           "dataset": {"path": manifest.dataset_path,
                       "hash": manifest.dataset_hash},
           "seed": manifest.seed,
           "code-version": manifest.code_version,
           "started": manifest.started,
           "finished": manifest.finished,
           "outputs": list(manifest.outputs)}
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write manifest {path}: {exc}") from None
    return path
