"""Writes data/sonar.csv: the 60 sonar band energies a1..a60 plus class (M or R), 208 rows.

Source: the KEEL copy of the UCI sonar data inside the `keel-ds` wheel
(keel_ds/data/balanced/raw/sonar.dat). KEEL stores the energies rounded to
three decimals.
"""
import csv
import pathlib
import subprocess
import sys
import tempfile
import zipfile


def main():
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else pathlib.Path(__file__).parent.parent / "data/sonar.csv")
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-d", tmp, "keel-ds==0.2.5"],
                       check=True)
        wheel = next(pathlib.Path(tmp).glob("keel_ds-*.whl"))
        text = zipfile.ZipFile(wheel).read("keel_ds/data/balanced/raw/sonar.dat").decode()
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        cells = [c.strip() for c in line.split(",")]
        assert len(cells) == 61 and cells[-1] in ("M", "R"), line[:40]
        rows.append([repr(float(c)) for c in cells[:60]] + [cells[-1]])
    assert len(rows) == 208
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"a{j}" for j in range(1, 61)] + ["class"])
        w.writerows(rows)
    print(f"wrote {out} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
