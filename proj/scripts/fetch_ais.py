"""Writes data/ais.csv: the 11 continuous AIS measurements plus sex (202 rows).

Source: DAAG::ais as shipped in the `rdatasets` wheel. The rownames and sport
columns are dropped; columns keep their R order.
"""
import io
import lzma
import pathlib
import subprocess
import sys
import tempfile
import zipfile

import pandas as pd

COLUMNS = ["rcc", "wcc", "hc", "hg", "ferr", "bmi", "ssf", "pcBfat", "lbm", "ht", "wt", "sex"]


def main():
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else pathlib.Path(__file__).parent.parent / "data/ais.csv")
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-d", tmp, "rdatasets==0.2.10"],
                       check=True)
        wheel = next(pathlib.Path(tmp).glob("rdatasets-*.whl"))
        raw = zipfile.ZipFile(wheel).read("rdatasets/_data/DAAG/ais.pkl.compress")
    df = pd.read_pickle(io.BytesIO(lzma.decompress(raw)))[COLUMNS]
    assert df.shape == (202, 12)
    out.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out, index=False)
    print(f"wrote {out} ({len(df)} rows)")


if __name__ == "__main__":
    main()
