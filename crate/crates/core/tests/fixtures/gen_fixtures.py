"""Regenerate the reference fixtures used by the engine tests.

Requires torch, transformers and tokenizers. Run from this directory:

    python gen_fixtures.py
"""
import json
import os

import torch
from tokenizers import ByteLevelBPETokenizer
from transformers import GPTNeoXConfig, GPTNeoXForCausalLM

HERE = os.path.dirname(os.path.abspath(__file__))

CORPUS = [
    "She liked the marinated lamb.",
    "She liked the friendly lamb.",
    "He polished the case.",
    "The glass was broken.",
    "The tense atmosphere lingered over the gaseous atmosphere.",
    "A wooden beam held up the roof of the barn.",
    "They filed the case with the court on Monday.",
    "The promise was broken before anyone noticed.",
] * 20

ENCODE = [
    "lamb",
    " lamb",
    "She liked the marinated lamb.",
    "The tense kind of atmosphere.",
    "beam wooden",
    "Unseen words: zyxt quokka 1234!",
    "  double  spaces\nand newline",
    "it's they're we'll",
]


def tokenizer_fixture():
    tok = ByteLevelBPETokenizer(add_prefix_space=False)
    tok.train_from_iterator(CORPUS, vocab_size=420, min_frequency=2, special_tokens=[])
    path = os.path.join(HERE, "bpe_tokenizer.json")
    tok.save(path)
    cases = [{"text": t, "ids": tok.encode(t).ids} for t in ENCODE]
    with open(os.path.join(HERE, "bpe_reference.json"), "w") as f:
        json.dump(cases, f, indent=1)


def model_fixture(name, parallel, rotary_pct, seed):
    torch.manual_seed(seed)
    cfg = GPTNeoXConfig(
        vocab_size=23,
        hidden_size=8,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        rotary_pct=rotary_pct,
        rotary_emb_base=10000,
        max_position_embeddings=16,
        use_parallel_residual=parallel,
        hidden_act="gelu",
        layer_norm_eps=1e-5,
        attention_dropout=0.0,
        hidden_dropout=0.0,
        tie_word_embeddings=False,
    )
    cfg._attn_implementation = "eager"
    model = GPTNeoXForCausalLM(cfg).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.uniform_(-0.8, 0.8)
    out_dir = os.path.join(HERE, name)
    model.save_pretrained(out_dir, safe_serialization=True)

    ids = [3, 17, 5, 5, 22, 0, 9]
    captured = []
    hooks = [
        layer.register_forward_hook(lambda m, i, o: captured.append(o[0][0].tolist()))
        for layer in model.gpt_neox.layers
    ]
    with torch.no_grad():
        out = model(torch.tensor([ids]), output_hidden_states=True, output_attentions=True)
    for h in hooks:
        h.remove()
    ref = {
        "ids": ids,
        "hidden": [out.hidden_states[0][0].tolist()] + captured,
        "attention": [a[0].tolist() for a in out.attentions],
        "logits": out.logits[0].tolist(),
    }
    with open(os.path.join(out_dir, "reference.json"), "w") as f:
        json.dump(ref, f)


if __name__ == "__main__":
    tokenizer_fixture()
    model_fixture("neox_parallel", True, 0.5, 0)
    model_fixture("neox_sequential", False, 1.0, 1)
