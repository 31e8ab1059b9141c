#manifest.py
"""
Line-delimited exposure-pair manifests

    under, over[, target], tag[, key=value ...]

Paths are relative to the manifest's directory. Blank lines and lines
starting with '#' are ignored.
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from utils.errors import InputError

logger = logging.getLogger(__name__)


@dataclass
class ManifestEntry:
    under: Path
    over: Path
    tag: str
    target: Optional[Path] = None
    attributes: Dict[str, str] = field(default_factory=dict)

    def attribute(self, name: str, default: Optional[float] = None) -> Optional[float]:
        """Numeric attribute such as ev_low, or default when absent"""
        if name not in self.attributes:
            return default
        try:
            return float(self.attributes[name])
        except ValueError:
            raise InputError(f"Attribute {name}={self.attributes[name]!r} of '{self.tag}' is not a number")


def _parse_line(fields: List[str], base: Path, where: str) -> ManifestEntry:
    fields = [f.strip() for f in fields]
    positional, attributes = [], {}
    for item in fields:
        if "=" in item:
            key, _, value = item.partition("=")
            attributes[key.strip()] = value.strip()
        elif attributes:
            raise InputError(f"{where}: positional field '{item}' after key=value attributes")
        else:
            positional.append(item)

    if len(positional) not in (3, 4) or not all(positional):
        raise InputError(f"{where}: expected 'under, over[, target], tag', got {len(positional)} fields")
    if len(positional) == 3:
        under, over, tag = positional
        target = None
    else:
        under, over, target, tag = positional
    return ManifestEntry(
        under=base / under,
        over=base / over,
        tag=tag,
        target=base / target if target else None,
        attributes=attributes,
    )


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """
    Parse a manifest file

    Raises:
        InputError: Unreadable file or malformed line
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"Could not read manifest {path}: {e}") from e

    entries = []
    for lineno, fields in enumerate(csv.reader(text.splitlines(), skipinitialspace=True), start=1):
        if not fields or not "".join(fields).strip() or fields[0].lstrip().startswith("#"):
            continue
        entries.append(_parse_line(fields, path.parent, f"{path}:{lineno}"))
    logger.info(f"Read {len(entries)} entries from {path}")
    return entries


def format_entry(entry: ManifestEntry, base: Union[str, Path]) -> str:
    """Render an entry as a manifest line with paths relative to base"""
    base = Path(base)
    paths = [entry.under, entry.over] + ([entry.target] if entry.target is not None else [])
    fields = [Path(os.path.relpath(p, base)).as_posix() for p in paths] + [entry.tag]
    fields += [f"{k}={v}" for k, v in entry.attributes.items()]
    return ", ".join(f"\"{f}\"" if "," in f else f for f in fields)


def append_entry(path: Union[str, Path], entry: ManifestEntry) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(format_entry(entry, path.parent) + "\n")
    except OSError as e:
        raise InputError(f"Could not write manifest {path}: {e}") from e
    return path
