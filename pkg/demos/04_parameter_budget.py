"""Parameter counts of the full-size presets, and the speech-translation
comparison between the Conformer, its halved-FFN variant and a Transformer
built with the same widths.

    python3 demos/04_parameter_budget.py
"""

from conformerkit import model as MD
from conformerkit.params import count_params

TARGETS = {"st": 43.5, "st-small": 30.9}


def main():
    counts = {}
    for name in ("default", "librispeech", "st", "st-small", "st-transformer", "ss", "tts-fs", "tts-fs2"):
        counts[name] = count_params(MD.build_model(MD.preset(name)))
        target = TARGETS.get(name)
        extra = f"  (reference {target}M, {counts[name] / 1e6 / target - 1:+.1%})" if target else ""
        print(f"{name:15s} {counts[name] / 1e6:7.2f}M{extra}")

    small, trans, full = counts["st-small"], counts["st-transformer"], counts["st"]
    print(f"\nsmall < transformer < conformer: {small < trans < full}")
    # the same-width Transformer lacks the second FFN and the conv module in
    # every encoder block, which is most of the gap to the Conformer
    per_block = (full - trans) / MD.preset("st").enc_blocks
    print(f"Conformer encoder blocks carry {per_block / 1e6:.2f}M more parameters each")


if __name__ == "__main__":
    main()
