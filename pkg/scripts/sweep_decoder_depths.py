"""
Example sweep over the fixation decoder depth N, the mask decoder depth M and
the description word limit WL on the toy preset.

Trains one model per combination on a synthetic training set, evaluates it on
a synthetic test set and writes one CSV row per combination with the four
measures.

    python scripts/sweep_decoder_depths.py --out sweep --steps 300
"""
import argparse
import itertools
import logging
import pathlib

import pandas as pd

from camopy.config import load_config
from camopy.data import synth_generate
from camopy.experiments import EvaluationExperiment, TrainingExperiment

logger = logging.getLogger("sweep")

FIXATION_BLOCKS = (1, 3)
MASK_BLOCKS = (1, 3, 6)
WORD_LIMITS = (50, 77)


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--out", default="sweep")
    parser.add_argument("--preset", default="toy")
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--n-train", type=int, default=32)
    parser.add_argument("--n-test", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)

    out = pathlib.Path(args.out)
    base = load_config(args.preset).replace(max_steps=args.steps, seed=args.seed, progressbar=False)
    canvas = base.image_size
    train = synth_generate(args.n_train, args.seed, out / "data" / "train", canvas=canvas)
    test = synth_generate(
        args.n_test, args.seed + 1, out / "data" / "test", canvas=canvas, split="test"
    )

    rows = []
    for n_fix, m_dec, words in itertools.product(FIXATION_BLOCKS, MASK_BLOCKS, WORD_LIMITS):
        tag = f"N{n_fix}_M{m_dec}_WL{words}"
        logger.info("Running %s", tag)
        config = base.replace(
            **{"fixation.blocks": n_fix, "mask.blocks": m_dec, "backbone.max_words": words}
        )
        run = TrainingExperiment(train, config, out / tag)
        result = EvaluationExperiment(test, run.model, out_dir=out / tag / "eval")
        rows.append({"N": n_fix, "M": m_dec, "WL": words, **result.report.summary()})

    table = pd.DataFrame(rows)
    table.to_csv(out / "sweep.csv", index=False)
    print(table.to_string(index=False))


if __name__ == "__main__":
    main()
