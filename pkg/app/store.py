"""JSONL run files, scenario packets and replicate accounting."""
import fcntl
import glob as globlib
import logging
import os
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import yaml
from pydantic import ValidationError

from app.exceptions import ConfigError, StoreError
from app.models import AccountingRow, Condition, RunRecord, ScenarioPacket

logger = logging.getLogger(__name__)

RUN_SUFFIX = ".jsonl"


def condition_filename(condition: Condition) -> str:
    """`{scenario}__T{temp}__N{N}__roles{bool}[__multimodel][__ablate-Role]...jsonl`."""
    return f"{condition.key}{RUN_SUFFIX}"


def serialize_run(record: RunRecord) -> str:
    return record.model_dump_json()


class RunFile:
    """One condition's append-only JSONL file."""

    def __init__(self, directory: Union[str, Path], condition: Condition):
        self.condition = condition
        self.path = Path(directory) / condition_filename(condition)

    def append(self, record: RunRecord) -> None:
        append_run(self, record)

    def load(self, strict: bool = True) -> List[RunRecord]:
        if not self.path.exists():
            return []
        return load_runs(str(self.path), strict=strict)

    def run_ids(self) -> List[str]:
        return [r.run_id for r in self.load(strict=False)]


def append_run(file: RunFile, record: RunRecord) -> None:
    """Append one record as a single line under an exclusive advisory lock.

    Raises:
        StoreError: the record's condition differs from the file's, or the write failed
    """
    if record.condition.key != file.condition.key:
        raise StoreError(
            f"record {record.run_id} has condition {record.condition.key}, "
            f"file expects {file.condition.key}"
        )
    line = (serialize_run(record) + "\n").encode("utf-8")
    try:
        file.path.parent.mkdir(parents=True, exist_ok=True)
        with open(file.path, "ab") as f:
            fcntl.flock(f.fileno(), fcntl.LOCK_EX)
            try:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())
            finally:
                fcntl.flock(f.fileno(), fcntl.LOCK_UN)
    except OSError as e:
        logger.error(f"Failed to append {record.run_id} to {file.path}: {e}")
        raise StoreError(f"cannot write {file.path}: {e}")
    logger.debug(f"Appended {record.run_id} to {file.path.name}")


def _expand(paths: Union[str, Path, Iterable[Union[str, Path]]]) -> List[Path]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    found: List[Path] = []
    for pattern in paths:
        pattern = str(pattern)
        if os.path.isdir(pattern):
            matches = sorted(globlib.glob(os.path.join(pattern, f"*{RUN_SUFFIX}")))
        else:
            matches = sorted(globlib.glob(pattern))
        if not matches and not any(ch in pattern for ch in "*?["):
            raise StoreError(f"no such run file: {pattern}")
        found.extend(Path(m) for m in matches)
    return found


def load_runs(
    paths: Union[str, Path, Iterable[Union[str, Path]]],
    strict: bool = True,
    diagnostics: Optional[List[str]] = None,
) -> List[RunRecord]:
    """Load every record from files, directories or glob patterns.

    Args:
        paths: File path, directory, glob, or a list of those
        strict: Raise on the first malformed line instead of skipping it
        diagnostics: Receives one message per skipped line in lenient mode

    Raises:
        StoreError: unreadable file, or malformed line in strict mode
    """
    records: List[RunRecord] = []
    for path in _expand(paths):
        try:
            with open(path, "rb") as f:
                lines = f.readlines()
        except OSError as e:
            raise StoreError(f"cannot read {path}: {e}")
        for line_no, raw in enumerate(lines, start=1):
            if not raw.strip():
                continue
            try:
                records.append(RunRecord.model_validate_json(raw.decode("utf-8")))
            except UnicodeDecodeError as e:
                message = f"{path}:{line_no}: undecodable record ({e.reason} at byte {e.start})"
            except ValidationError as e:
                message = f"{path}:{line_no}: malformed record ({e.error_count()} errors)"
            else:
                continue
            if strict:
                raise StoreError(message)
            logger.warning(f"Skipping {message}")
            if diagnostics is not None:
                diagnostics.append(message)
    return records


def group_by_condition(records: Iterable[RunRecord]) -> Dict[str, List[RunRecord]]:
    groups: Dict[str, List[RunRecord]] = defaultdict(list)
    for record in records:
        groups[record.condition.key].append(record)
    return dict(sorted(groups.items()))


def run_accounting(
    records: Iterable[RunRecord],
    targets: Optional[Dict[str, int]] = None,
    default_target: Optional[int] = None,
    group: str = "Core",
) -> List[AccountingRow]:
    """Target versus realized (non-excluded) replicates per condition, sorted by key.

    A condition without an explicit target uses `default_target`, or the
    target_replicates stored in its records.
    """
    targets = targets or {}
    rows = []
    for key, runs in group_by_condition(r for r in records if not r.is_continuation).items():
        target = targets.get(key, default_target)
        if target is None:
            target = runs[0].condition.target_replicates
        realized = sum(1 for r in runs if not r.excluded)
        rows.append(
            AccountingRow(
                group=group, condition=key, target=target, realized=realized,
                deficit=target - realized,
            )
        )
    return rows


def load_scenarios(path: Union[str, Path]) -> List[ScenarioPacket]:
    """Load and validate scenario packets.

    Raises:
        ConfigError: invalid packet or duplicate ids
        StoreError: unreadable file
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise StoreError(f"cannot read scenarios {path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}")
    entries = data.get("scenarios", []) if isinstance(data, dict) else data
    if not isinstance(entries, list):
        raise ConfigError(f"{path}: expected a list of scenarios")
    packets = []
    for entry in entries:
        try:
            packets.append(ScenarioPacket.model_validate(entry))
        except ValidationError as e:
            raise ConfigError(f"{path}: invalid scenario: {e}")
    ids = [p.id for p in packets]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise ConfigError(f"{path}: duplicate scenario ids {duplicates}")
    return packets
