"""Triplet manifests: JSON-Lines records of (instruction, input, edited).

Unknown fields are preserved verbatim and round-tripped, so external
annotators can stash extra metadata without the pipeline losing it.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["TripletRecord", "ManifestError", "load_manifest", "save_manifest"]

REQUIRED_FIELDS = ("id", "input_path", "edited_path", "instruction")
_KNOWN_FIELDS = REQUIRED_FIELDS + (
    "edit_type",
    "width",
    "height",
    "mask_path",
    "scores",
    "stage_verdicts",
    "drop_reason",
    "digest_input",
    "digest_edited",
)


class ManifestError(ValueError):
    """Schema violation; carries the offending line number when known."""


@dataclass
class TripletRecord:
    id: str
    input_path: str
    edited_path: str
    instruction: str
    edit_type: str = "unknown"
    width: int = 0
    height: int = 0
    mask_path: str | None = None
    scores: dict[str, float] = field(default_factory=dict)
    stage_verdicts: dict[str, str] = field(default_factory=dict)
    drop_reason: str | None = None
    digest_input: str | None = None
    digest_edited: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        obj = {
            "id": self.id,
            "input_path": self.input_path,
            "edited_path": self.edited_path,
            "instruction": self.instruction,
            "edit_type": self.edit_type,
            "width": self.width,
            "height": self.height,
            "scores": self.scores,
            "stage_verdicts": self.stage_verdicts,
        }
        if self.mask_path is not None:
            obj["mask_path"] = self.mask_path
        if self.drop_reason is not None:
            obj["drop_reason"] = self.drop_reason
        if self.digest_input is not None:
            obj["digest_input"] = self.digest_input
        if self.digest_edited is not None:
            obj["digest_edited"] = self.digest_edited
        obj.update(self.extra)
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict, line_no: int | None = None) -> "TripletRecord":
        where = f" (line {line_no})" if line_no is not None else ""
        if not isinstance(obj, dict):
            raise ManifestError(f"record is not a JSON object{where}")
        for name in REQUIRED_FIELDS:
            if name not in obj:
                raise ManifestError(f"missing required field {name!r}{where}")
            if not isinstance(obj[name], str):
                raise ManifestError(f"field {name!r} must be a string{where}")
        extra = {k: v for k, v in obj.items() if k not in _KNOWN_FIELDS}
        return cls(
            id=obj["id"],
            input_path=obj["input_path"],
            edited_path=obj["edited_path"],
            instruction=obj["instruction"],
            edit_type=obj.get("edit_type", "unknown"),
            width=int(obj.get("width", 0)),
            height=int(obj.get("height", 0)),
            mask_path=obj.get("mask_path"),
            scores=dict(obj.get("scores", {})),
            stage_verdicts=dict(obj.get("stage_verdicts", {})),
            drop_reason=obj.get("drop_reason"),
            digest_input=obj.get("digest_input"),
            digest_edited=obj.get("digest_edited"),
            extra=extra,
        )


def load_manifest(path: str | Path) -> list[TripletRecord]:
    """Parse a JSON-Lines manifest with strict schema validation.

    Malformed lines and missing required fields raise ManifestError naming
    the line; duplicate ids are rejected. Blank lines are skipped.
    """
    records: list[TripletRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON (line {line_no}): {exc.msg}") from exc
            record = TripletRecord.from_json_obj(obj, line_no)
            if record.id in seen:
                raise ManifestError(f"duplicate id {record.id!r} (line {line_no})")
            seen.add(record.id)
            records.append(record)
    return records


def save_manifest(records, path: str | Path) -> None:
    """Write records as JSON-Lines atomically (temp file + rename)."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record.to_json_obj(), sort_keys=True))
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
