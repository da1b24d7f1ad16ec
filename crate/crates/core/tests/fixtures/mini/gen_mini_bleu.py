"""Pins the reference SacreBLEU score for hyp.txt against ref.txt.

    python3 gen_mini_bleu.py > mini_bleu.json
"""
import json

import sacrebleu
from sacrebleu.metrics import BLEU

hyps = open("hyp.txt", encoding="utf-8").read().splitlines()
refs = open("ref.txt", encoding="utf-8").read().splitlines()
bleu = BLEU()
b = bleu.corpus_score(hyps, [refs])
print(json.dumps({
    "sacrebleu_version": sacrebleu.__version__,
    "signature": str(bleu.get_signature()),
    "score": b.score,
    "precisions": b.precisions,
    "bp": b.bp,
    "sys_len": b.sys_len,
    "ref_len": b.ref_len,
}, indent=2))
