"""Fuse several annotator maps into pseudo ground truth.

Five simulated annotators see the same synthetic scenes through
different blur widths and noise; their maps are aggregated with equal
weights, checked for suspicious annotators and split into a manifest.
How close each annotator and the aggregate come to the true map is
printed as CC.

    python3 demos/pseudo_ground_truth.py [--out /tmp/fbsal_pseudo]
"""

import argparse
import contextlib
import io
import json
from pathlib import Path

import numpy as np

from fbsal import data, metrics, pseudo
from fbsal.cli import main


def main_demo():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="/tmp/fbsal_pseudo")
    args = ap.parse_args()
    out = Path(args.out)
    rng = np.random.default_rng(3)
    samples = [data.synth_sample(rng, (32, 32), id=f"img{i:04d}") for i in range(20)]

    (out / "images").mkdir(parents=True, exist_ok=True)
    dirs = []
    for j, sigma in enumerate((2.0, 3.0, 4.0, 5.0, 6.0)):
        d = out / f"annotator{j}"
        d.mkdir(exist_ok=True)
        dirs.append(d)
        for s in samples:
            m = data.fixations_to_saliency(s.fixations, sigma) + 0.15 * rng.random((32, 32))
            data.write_map(m, d / f"{s.id}.smap")
    for s in samples:
        data.write_map(s.image[0], out / "images" / f"{s.id}.r.smap")

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(["aggregate", "--inputs", ",".join(map(str, dirs)), "--out", str(out / "pseudo"),
                     "--manifest", str(out / "manifest.json"), "--images", str(out / "images"), "--split-ratio", "0.8"])
    print(buf.getvalue(), end="")
    print("aggregate exit code", code)

    for d in dirs:
        ccs = [metrics.cc(data.load_unit_map(d / f"{s.id}.smap"), s.gt) for s in samples]
        print(f"{d.name:12s} mean CC vs truth {np.mean(ccs):.4f}")
    ccs = [metrics.cc(data.load_unit_map(out / "pseudo" / f"{s.id}.pgm"), s.gt) for s in samples]
    print(f"{'aggregate':12s} mean CC vs truth {np.mean(ccs):.4f}")

    flipped = pseudo.AnnotationSet("x", [data.load_unit_map(d / "img0000.smap") for d in dirs], [d.name for d in dirs])
    flipped.annotator_maps[2] = 1.0 - flipped.annotator_maps[2]
    print("warnings with annotator2 inverted:", sorted({w.annotators for w in pseudo.validate_annotations(flipped)}))
    print("manifest counts:", json.loads((out / "manifest.json").read_text())["counts"])


if __name__ == "__main__":
    main_demo()
