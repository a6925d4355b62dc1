"""Run reports and tabular CSV output."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import InvalidArgument


@dataclass
class RunReport:
    kind: str
    name: str
    seed: int
    metrics: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def metric(self, key: str, value) -> None:
        self.metrics[key] = float(value)

    def timing(self, key: str, seconds: float) -> None:
        if not seconds >= 0:
            raise InvalidArgument(f"timing {key} must be >= 0, got {seconds}")
        self.timings[key] = float(seconds)

    def artifact(self, path) -> Path:
        self.artifacts.append(str(path))
        return Path(path)

    def to_json(self) -> str:
        # JSON has no inf/nan; keep them as strings so the file stays valid
        def clean(d):
            return {k: (v if math.isfinite(v) else repr(v)) for k, v in d.items()}

        body = asdict(self)
        body["metrics"] = clean(self.metrics)
        body["timings"] = clean(self.timings)
        return json.dumps(body, indent=2, sort_keys=True)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "report.json"
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunReport":
        body = json.loads(Path(path).read_text())
        for key in ("metrics", "timings"):
            body[key] = {k: float(v) for k, v in body[key].items()}
        return cls(**body)

    def summary(self) -> str:
        lines = [f"{self.kind} '{self.name}' (seed {self.seed})"]
        width = max((len(k) for k in list(self.metrics) + list(self.timings)), default=0)
        lines.append("metrics:")
        lines += [f"  {k:<{width}}  {v:.6g}" for k, v in self.metrics.items()]
        lines.append("timings [s]:")
        lines += [f"  {k:<{width}}  {v:.6g}" for k, v in self.timings.items()]
        lines.append(f"{len(self.artifacts)} files written")
        return "\n".join(lines)


def write_table_csv(path, header, rows) -> Path:
    """Numeric table; floats are written with ``repr`` so reloads are exact."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return path


def read_table_csv(path) -> tuple:
    """``(header, rows)``; cells that parse as numbers come back as int or float."""
    def conv(s):
        try:
            return int(s)
        except ValueError:
            pass
        try:
            return float(s)
        except ValueError:
            return s

    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[conv(c) for c in row] for row in r]
    return header, rows
