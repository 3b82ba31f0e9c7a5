#!/usr/bin/env python3
"""Regenerate the committed golden fixtures from the reference Python stack.

    python3 tools/make_goldens.py tokenizer   # fixtures/golden/tokenizer_golden.jsonl
    python3 tools/make_goldens.py encoder     # fixtures/golden/encoder_*.trace

The tokenizer goldens come from the `tokenizers`-backed BertTokenizerFast over
fixtures/vocab.txt. The encoder goldens come from a transformers BertModel
(eager attention, eval mode) loaded with the deterministic synthetic weights
described in fixtures/synthetic_bert/params.json, so the Rust test suite can
rebuild the exact same weights without a multi-hundred-megabyte checkpoint.
"""

import hashlib
import json
import re
import struct
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
FIX = ROOT / "fixtures"
GOLDEN = FIX / "golden"
MAX_LEN = 128

MASK64 = (1 << 64) - 1
GOLDEN_RATIO = np.uint64(0x9E3779B97F4A7C15)

ENCODER_SENTENCES = [
    ("newspaper", 0, "The newspaper fired its editor in chief."),
    ("newspaper", 0, "The newspaper was soaked by the rain on the porch."),
    ("bank", 0, "The bank of the river was covered in wild flowers."),
    ("reinstatement", 0, "The union demanded the immediate reinstatement of the dismissed workers."),
    ("contextualization", 0, "Contextualization is central to modern language models."),
    ("unbelievably", 0, "The results were unbelievably good, according to the researchers."),
    ("rate", 1, "The rate of growth slowed, and the unemployment rate rose."),
    ("café", 0, "We met at the café near the Gare du Nord."),
    ("earthquake", 0, "A magnitude-7.8 earthquake struck off the coast early Tuesday morning."),
    ("crane", 0, "The crane stood motionless in the shallow lake."),
    ("pitch", 0, "The pitch of her voice rose when she got excited."),
    ("negotiations", 0, "Negotiations between the two sides resumed on Wednesday after a brief pause."),
]


def read_corpus():
    rows = []
    for line in (FIX / "tokenizer_corpus.tsv").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        keyword, occ, sentence = line.split("\t", 2)
        rows.append((keyword, int(occ), sentence))
    return rows


def load_tokenizer():
    from transformers import BertTokenizerFast

    return BertTokenizerFast(str(FIX / "vocab.txt"), do_lower_case=True)


def keyword_span(tok, text, keyword, occurrence):
    """Piece span of the n-th whole-word occurrence, found through char offsets."""
    enc = tok(text, return_offsets_mapping=True, truncation=True, max_length=MAX_LEN)
    pattern = re.compile(r"(?<!\w)" + re.escape(keyword.lower()) + r"(?!\w)")
    matches = list(pattern.finditer(text.lower()))
    start_char, end_char = matches[occurrence].span()
    covered = [
        i
        for i, (s, e) in enumerate(enc["offset_mapping"])
        if e > s and s < end_char and e > start_char
    ]
    return enc, [covered[0], covered[-1] + 1]


def cmd_tokenizer():
    tok = load_tokenizer()
    out = []
    for keyword, occ, sentence in read_corpus():
        enc, span = keyword_span(tok, sentence, keyword, occ)
        ids = enc["input_ids"]
        out.append(
            {
                "text": sentence,
                "keyword": keyword,
                "occurrence": occ,
                "ids": ids,
                "pieces": tok.convert_ids_to_tokens(ids),
                "keyword_span": span,
            }
        )
    GOLDEN.mkdir(parents=True, exist_ok=True)
    with open(GOLDEN / "tokenizer_golden.jsonl", "w", encoding="utf-8") as f:
        for rec in out:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(f"wrote {len(out)} tokenizer golden records")


def fnv1a64(name):
    h = 0xCBF29CE484222325
    for b in name.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h


def synthetic_tensor(name, shape, rules):
    rule = next(r for r in rules if name.endswith(r["suffix"]))
    n = int(np.prod(shape))
    with np.errstate(over="ignore"):
        i = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(fnv1a64(name)) + i * GOLDEN_RATIO
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    u = (z >> np.uint64(40)).astype(np.float32) * np.float32(2.0**-24)
    v = np.float32(rule["offset"]) + np.float32(rule["scale"]) * (np.float32(2.0) * u - np.float32(1.0))
    return v.astype(np.float32).reshape(shape)


def cmd_encoder():
    import torch
    from transformers import BertConfig, BertModel

    torch.set_num_threads(1)
    cfg_json = json.loads((FIX / "synthetic_bert" / "config.json").read_text())
    rules = json.loads((FIX / "synthetic_bert" / "params.json").read_text())["rules"]
    config = BertConfig(**{k: v for k, v in cfg_json.items() if k not in ("architectures",)})
    config._attn_implementation = "eager"
    model = BertModel(config, add_pooling_layer=False).eval()

    state = {}
    for name, param in model.state_dict().items():
        if name.endswith("position_ids") or name.endswith("token_type_ids"):
            continue
        state[name] = torch.from_numpy(synthetic_tensor(name, tuple(param.shape), rules))
    missing, unexpected = model.load_state_dict(state, strict=False)
    assert not unexpected, unexpected
    assert all(m.endswith("_ids") for m in missing), missing

    digest = hashlib.sha256()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].numpy().tobytes())
    weights_digest = digest.hexdigest()

    captures = {}

    def grab(key):
        def hook(_module, _inputs, output):
            if isinstance(output, tuple):
                output = output[0]
            captures[key] = output[0].detach().clone()

        return hook

    model.embeddings.register_forward_hook(grab("emb"))
    for li, layer in enumerate(model.encoder.layer):
        layer.attention.output.dense.register_forward_hook(grab(f"sa_proj{li}"))
        layer.attention.output.register_forward_hook(grab(f"sa_ln{li}"))
        layer.intermediate.register_forward_hook(grab(f"acts{li}"))
        layer.output.register_forward_hook(grab(f"out{li}"))

    tok = load_tokenizer()
    word_table = model.embeddings.word_embeddings.weight.detach()
    policies = {
        "encoder_a.trace": {
            "sa_point": "post_projection_pre_residual",
            "static_embedding_kind": "word_table_row",
            "pooling": "first_piece",
        },
        "encoder_b.trace": {
            "sa_point": "post_attention_layernorm",
            "static_embedding_kind": "embedding_layer_output",
            "pooling": "mean_pieces",
        },
    }
    records = {k: [] for k in policies}
    samples = []
    for idx, (keyword, occ, sentence) in enumerate(ENCODER_SENTENCES):
        enc, span = keyword_span(tok, sentence, keyword, occ)
        ids = enc["input_ids"]
        captures.clear()
        with torch.no_grad():
            model(
                input_ids=torch.tensor([ids]),
                token_type_ids=torch.zeros(1, len(ids), dtype=torch.long),
                attention_mask=torch.ones(1, len(ids), dtype=torch.long),
            )
        s, e = span
        for fname, pol in policies.items():

            def pool(t):
                if pol["pooling"] == "first_piece":
                    return t[s]
                return t[s:e].mean(dim=0)

            if pol["static_embedding_kind"] == "word_table_row":
                static = word_table[ids[s]]
            else:
                static = pool(captures["emb"])
            parts = [static]
            sa_key = "sa_proj" if pol["sa_point"] == "post_projection_pre_residual" else "sa_ln"
            for li in range(config.num_hidden_layers):
                parts.append(pool(captures[f"{sa_key}{li}"]))
                parts.append(pool(captures[f"acts{li}"]))
                parts.append(pool(captures[f"out{li}"]))
            records[fname].append(torch.cat(parts).numpy().astype("<f4"))
        samples.append(
            {
                "index": idx,
                "id": f"golden-{idx:03}",
                "keyword": keyword,
                "sense_label": f"{keyword}::golden",
                "sentence": sentence,
                "keyword_occurrence": occ,
                "source": "golden",
                "span": span,
                "piece_ids": ids,
            }
        )

    hidden, inter, layers = config.hidden_size, config.intermediate_size, config.num_hidden_layers
    record_len = hidden + layers * (hidden + inter + hidden)
    for fname, pol in policies.items():
        payload = b"".join(r.tobytes() for r in records[fname])
        assert all(r.shape[0] == record_len for r in records[fname])
        header = {
            "format_version": 1,
            "model_checksum": f"synthetic-bert:{weights_digest}",
            "dataset_id": "golden-encoder",
            "capture_policy": pol,
            "num_layers": layers,
            "dims": {"static": hidden, "sa": hidden, "acts": inter, "out": hidden},
            "record_len": record_len,
            "payload_len": len(payload),
            "samples": samples,
            "skipped": [],
        }
        head = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
        with open(GOLDEN / fname, "wb") as f:
            f.write(b"CTXTRC01")
            f.write(struct.pack("<Q", len(head)))
            f.write(head)
            f.write(payload)
        print(f"wrote {fname}: {len(samples)} records, {len(payload)} payload bytes")
    (GOLDEN / "synthetic_weights.sha256").write_text(weights_digest + "\n")


if __name__ == "__main__":
    {"tokenizer": cmd_tokenizer, "encoder": cmd_encoder}[sys.argv[1]]()
