"""
Output record schemas
Line-delimited records written by the command-line driver, plus the run manifest
"""

import hashlib
import json
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field


class RunHeader(BaseModel):
    """First record of every output stream"""
    record: str = "run_header"
    command: str
    parameters: Dict[str, Any]
    seed: int
    code_version: str
    config_digest: str


class RunManifest(BaseModel):
    """Schema for run tracking, written next to the record stream"""
    command: str
    parameters: Dict[str, Any]
    seed: int
    code_version: str
    config_digest: str
    status: str = "running"
    started_at: datetime
    finished_at: Optional[datetime] = None
    error_message: Optional[str] = None
    outputs: List[str] = Field(default_factory=list)

    def header(self) -> RunHeader:
        return RunHeader(
            command=self.command,
            parameters=self.parameters,
            seed=self.seed,
            code_version=self.code_version,
            config_digest=self.config_digest,
        )


class ModeRecord(BaseModel):
    """Occupation of one Fourier mode in one sample"""
    record: str = "mode"
    sample: int
    mode: Tuple[int, ...]
    n: int


class OccupationRecord(BaseModel):
    """Summary of one occupation-number sample"""
    record: str = "occupation"
    sample: int
    N: int
    n0: int
    events: Dict[str, bool] = Field(default_factory=dict)


class SpectrumRecord(BaseModel):
    """Sorted cycle lengths of one sample"""
    record: str = "spectrum"
    sample: int
    lengths: List[int]
    energy: Optional[float] = None
    accepted: Dict[str, int] = Field(default_factory=dict)


class ReportRecord(BaseModel):
    """A named report or table row"""
    record: str
    fields: Dict[str, Any]


class CheckRecord(BaseModel):
    """Outcome of one self-test check"""
    record: str = "check"
    name: str
    passed: bool
    value: Optional[float] = None
    detail: str = ""


def dump_line(record: BaseModel) -> str:
    """Serialize a record as one JSON line with sorted keys"""
    return json.dumps(record.model_dump(mode="json"), sort_keys=True)


def config_digest(parameters: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a parameter set"""
    canonical = json.dumps(parameters, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
