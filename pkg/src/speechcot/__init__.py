"""Chain-of-thought prompting for speech translation, at desk scale.

A first-pass model transcribes synthetic speech; the transcript is spliced
into the encoder prompt of a second-pass translation model alongside the
encoded speech. Everything needed to compare that two-pass system against a
speech-only baseline, single-pass joint prediction, and a text cascade lives
here: autodiff, transformer stacks, LoRA, toy bilingual corpora, training,
greedy decoding, BLEU/WER, and experiment suites.
"""
from .backend import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
