"""Append-only record of spent privacy budgets (JSON lines)."""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path
from typing import Optional

from .privacy import PrivacyBudget

ENV_VAR = "DPCATE_LEDGER"


class BudgetRefused(RuntimeError):
    """The requested budget id has already been spent."""


def content_id(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode())
        h.update(b"\0")
    return h.hexdigest()[:32]


def resolve_path(explicit: Optional[str], default_dir) -> Path:
    if explicit:
        return Path(explicit)
    if os.environ.get(ENV_VAR):
        return Path(os.environ[ENV_VAR])
    return Path(default_dir) / "ledger.jsonl"


class Ledger:
    def __init__(self, path):
        self.path = Path(path)

    def entries(self) -> list:
        if not self.path.exists():
            return []
        out = []
        with open(self.path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out

    def is_spent(self, budget_id: str) -> bool:
        return any(e.get("budget_id") == budget_id for e in self.entries())

    def consume(self, budget_id: str, command: str, budget: PrivacyBudget, **detail) -> dict:
        """Record ``budget_id`` as spent or raise :class:`BudgetRefused`."""
        if self.is_spent(budget_id):
            raise BudgetRefused(f"budget {budget_id} was already consumed (ledger {self.path})")
        entry = {"budget_id": budget_id, "command": command, "budget": budget.to_dict(),
                 "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), **detail}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry
