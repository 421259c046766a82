"""Report files: JSON and CSV encodings, an async writer and the hash manifest."""
import asyncio
import csv
import io
from pathlib import Path
from typing import Any, List, Sequence, Tuple, Union

import aiofiles
from pydantic import BaseModel

from scopfsampler.exceptions import OutputError
from scopfsampler.sampler import TRACE_HEADER, trace_rows
from scopfsampler.scopf import HISTORY_HEADER, SCHEMA_VERSION, ContingencyPrediction, ScopfResult
from scopfsampler.stresstest import (
    SAMPLE_HEADER,
    OutageComparisonRow,
    StressReport,
    outage_count,
    severity_histogram,
)
from scopfsampler.utils import get_logger, json_dumps, sha256_hex

logger = get_logger("scopfsampler.reports")

class ReportFile:
    media_type = "text/plain"

    def __init__(self, name: str, content: Any):
        self.name = name
        self.content = content

    def _encode_content(self) -> bytes:
        if isinstance(self.content, (str, bytes)):
            return self.content.encode("utf-8") if isinstance(self.content, str) else self.content
        return str(self.content).encode("utf-8")

    @property
    def body(self) -> bytes:
        return self._encode_content()

    async def write(self, directory: Path) -> "ManifestEntry":
        body = self.body
        path = directory / self.name
        try:
            async with aiofiles.open(path, mode="wb") as f:
                await f.write(body)
        except OSError as e:
            logger.error(f"Error writing {path}: {e}")
            raise OutputError(f"cannot write {path}: {e.strerror or e}")
        logger.debug(f"Wrote {path} ({len(body)} bytes)")
        return ManifestEntry(path=self.name, sha256=sha256_hex(body), bytes=len(body))

class JSONReport(ReportFile):
    media_type = "application/json"

    def _encode_content(self) -> bytes:
        return json_dumps(self.content)

class CSVReport(ReportFile):
    """``content`` is a (header, rows) pair; floats use their shortest round-trip form"""
    media_type = "text/csv"

    def _encode_content(self) -> bytes:
        header, rows = self.content
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buffer.getvalue().encode("utf-8")

class ManifestEntry(BaseModel):
    path: str
    sha256: str
    bytes: int

class Manifest(BaseModel):
    schema_version: str = SCHEMA_VERSION
    files: List[ManifestEntry]

    def hashes(self) -> dict:
        return {entry.path: entry.sha256 for entry in self.files}

Result = Union[ScopfResult, ContingencyPrediction, StressReport, Sequence[OutageComparisonRow]]

def _contingency_table(contingencies, reports, threshold: float = 0.9) -> Tuple[List[str], List[list]]:
    header = ["index", "severity", "risk_adjusted", "log_prior", "economic_cost", "converged", "outage_count"]
    rows = [
        [j, r.severity, r.risk_adjusted, r.log_prior, r.economic_cost, int(r.converged), outage_count(y, threshold)]
        for j, (y, r) in enumerate(zip(contingencies, reports))
    ]
    return header, rows

def _trace_table(chains) -> Tuple[List[str], List[list]]:
    if chains is None:
        return list(TRACE_HEADER), []
    return trace_rows(chains.chains)

def report_files(result: Result) -> List[ReportFile]:
    """The files emitted for each kind of result"""
    if isinstance(result, ScopfResult):
        history = [[getattr(s, column) for column in HISTORY_HEADER] for s in result.history]
        return [
            JSONReport("result.json", result.to_dict()),
            CSVReport("history.csv", (list(HISTORY_HEADER), history)),
            CSVReport("contingencies.csv", _contingency_table(result.contingencies, result.reports)),
            CSVReport("trace.csv", _trace_table(result.contingency_chains)),
        ]
    if isinstance(result, ContingencyPrediction):
        return [
            JSONReport("attack.json", result.to_dict()),
            CSVReport("contingencies.csv", _contingency_table(result.contingencies, result.reports)),
            CSVReport("trace.csv", _trace_table(result.chains)),
        ]
    if isinstance(result, StressReport):
        outages = [[count, failures] for count, failures in sorted(result.outage_histogram.items())]
        return [
            JSONReport("stress.json", result.model_dump(mode="json")),
            CSVReport("samples.csv", (list(SAMPLE_HEADER), result.sample_rows())),
            CSVReport("severity_histogram.csv", (["bin_left", "bin_right", "count"], severity_histogram(result))),
            CSVReport("outage_histogram.csv", (["outage_count", "failures"], outages)),
        ]
    if isinstance(result, (list, tuple)) and all(isinstance(row, OutageComparisonRow) for row in result):
        header = ["outage_count", "failures_a", "failures_b", "ratio", "undefined"]
        rows = [[r.outage_count, r.failures_a, r.failures_b, "" if r.ratio is None else r.ratio, int(r.undefined)]
                for r in result]
        return [
            JSONReport("comparison.json", {
                "schema_version": SCHEMA_VERSION,
                "rows": [row.model_dump() for row in result],
            }),
            CSVReport("comparison.csv", (header, rows)),
        ]
    raise TypeError(f"No report layout for {type(result).__name__}")

async def write_reports(files: Sequence[ReportFile], out_dir: Union[str, Path]) -> Manifest:
    """Write the files concurrently, then the manifest listing their hashes"""
    directory = Path(out_dir)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create output directory {directory}: {e.strerror or e}")
    entries = await asyncio.gather(*(f.write(directory) for f in files))
    manifest = Manifest(files=sorted(entries, key=lambda entry: entry.path))
    await JSONReport("manifest.json", manifest.model_dump()).write(directory)
    logger.info(f"Wrote {len(entries)} report files to {directory}")
    return manifest

def emit_reports(result: Result, out_dir: Union[str, Path]) -> Manifest:
    return asyncio.run(write_reports(report_files(result), out_dir))
