import json
import subprocess
import sys
from pathlib import Path

SCRIPT = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


def test_kernel_benchmark_backends_agree(tmp_path):
    out = tmp_path / "kernels.json"
    subprocess.run([sys.executable, str(SCRIPT), "--subjects", "40", "--repeats", "1", "--json", str(out)], check=True, capture_output=True)
    rows = json.loads(out.read_text())["rows"]
    assert len(rows) == 5
    assert all(r["outputs_match"] for r in rows), rows
