"""End-to-end command-line session in a scratch directory.

Synthesizes a small dataset, trains the auto-encoder and a prior-regularized
segmenter through the CLI, predicts one image and evaluates it. Each command
is echoed before it runs.
"""

import argparse
import shlex
import subprocess
import sys
import tempfile
from pathlib import Path

AE_CFG = """\
stage = ae
prior = socae
epochs = 25
batch_size = 8
learning_rate = 0.003
augmentation = full
depth = 4
base_channels = 4
latent_channels = 16
head_bias = -3
input_size = 64x64
"""

SEG_CFG = """\
stage = seg
prior = socae
lambda = 10
epochs = 20
batch_size = 8
augmentation = full
depth = 4
base_channels = 8
input_size = 64x64
"""


def run(*args):
    cmd = [sys.executable, "-m", "vesselprior", *map(str, args)]
    print("$ vesselprior " + " ".join(shlex.quote(str(a)) for a in args), flush=True)
    proc = subprocess.run(cmd)
    if proc.returncode:
        sys.exit(f"command failed with exit code {proc.returncode}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", type=Path, help="keep outputs here instead of a temporary directory")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        root = args.workdir or Path(tmp)
        root.mkdir(parents=True, exist_ok=True)
        (root / "ae.cfg").write_text(AE_CFG)
        (root / "seg.cfg").write_text(SEG_CFG)

        run("synth", "--count", 64, "--size", 64, "--seed", 7, "--out", root / "data")
        run("synth", "--count", 8, "--size", 64, "--seed", 8, "--out", root / "test")
        run("train-ae", "--data", root / "data", "--config", root / "ae.cfg", "--out", root / "ae.ckpt")
        run("train-seg", "--data", root / "data", "--config", root / "seg.cfg",
            "--prior", root / "ae.ckpt", "--val", root / "test", "--out", root / "seg.ckpt")
        (root / "pred").mkdir(exist_ok=True)
        for image in sorted((root / "test" / "images").glob("*.png")):
            run("predict", "--checkpoint", root / "seg.ckpt", "--image", image,
                "--gt", root / "test" / "masks" / image.name, "--out", root / "pred" / image.stem)
        run("eval", "--gt", root / "test" / "masks", "--pred", root / "pred", "--csv", root / "metrics.csv")
        print(f"\noverlays: {root / 'pred'}/*_overlay.png (prediction blue, ground truth green)")


if __name__ == "__main__":
    main()
