"""Writes a tiny randomly initialized GPT-2 (Hugging Face implementation) as a
LAMO checkpoint, plus its byte vocabulary and reference logits for a prompt.

Regenerate the committed fixtures with:

    python3 scripts/make_reference_fixture.py crates/core/tests/fixtures
"""

import json
import struct
import sys
from pathlib import Path

import torch
from transformers import GPT2Config, GPT2LMHeadModel

PROMPT = "Hello, my name is Tom."
ALIGN = 64
TOP = 8


def align_up(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def byte_vocab():
    vocab = {}
    for b in range(256):
        ch = chr(b)
        vocab[ch if ch.isprintable() and not ch.isspace() else f"<0x{b:02X}>"] = b
    vocab["<|endoftext|>"] = 256
    return vocab


def lamo_tensors(model, cfg):
    sd = model.transformer.state_dict()
    d = cfg.n_embd
    out = []
    for i in range(cfg.n_layer):
        p = f"h.{i}"
        out.append((f"{p}.ln_1.weight", sd[f"{p}.ln_1.weight"]))
        out.append((f"{p}.ln_1.bias", sd[f"{p}.ln_1.bias"]))
        # Conv1D stores [in, out]; split the fused projection and transpose
        w = sd[f"{p}.attn.c_attn.weight"]
        b = sd[f"{p}.attn.c_attn.bias"]
        for j, name in enumerate("qkv"):
            out.append((f"{p}.attn.{name}.weight", w[:, j * d:(j + 1) * d].T))
            out.append((f"{p}.attn.{name}.bias", b[j * d:(j + 1) * d]))
        out.append((f"{p}.attn.c_proj.weight", sd[f"{p}.attn.c_proj.weight"].T))
        out.append((f"{p}.attn.c_proj.bias", sd[f"{p}.attn.c_proj.bias"]))
        out.append((f"{p}.ln_2.weight", sd[f"{p}.ln_2.weight"]))
        out.append((f"{p}.ln_2.bias", sd[f"{p}.ln_2.bias"]))
        out.append((f"{p}.mlp.c_fc.weight", sd[f"{p}.mlp.c_fc.weight"].T))
        out.append((f"{p}.mlp.c_fc.bias", sd[f"{p}.mlp.c_fc.bias"]))
        out.append((f"{p}.mlp.c_proj.weight", sd[f"{p}.mlp.c_proj.weight"].T))
        out.append((f"{p}.mlp.c_proj.bias", sd[f"{p}.mlp.c_proj.bias"]))
    out.append(("ln_f.weight", sd["ln_f.weight"]))
    out.append(("ln_f.bias", sd["ln_f.bias"]))
    out.append(("wpe", sd["wpe.weight"]))
    out.append(("wte", sd["wte.weight"]))
    return [(n, t.detach().contiguous().float()) for n, t in out]


def write_checkpoint(path, cfg, tensors, vocab_name):
    entries, offset = [], 0
    for name, t in tensors:
        entries.append({"name": name, "dtype": "f32", "shape": list(t.shape), "offset": offset})
        offset = align_up(offset + t.numel() * 4)
    header = {
        "config": {
            "n_layers": cfg.n_layer,
            "n_heads": cfg.n_head,
            "d_model": cfg.n_embd,
            "d_ff": cfg.n_inner or 4 * cfg.n_embd,
            "vocab_size": cfg.vocab_size,
            "max_positions": cfg.n_positions,
            "dropout": 0.0,
        },
        "tensors": entries,
        "payload_bytes": offset,
        "tokenizer": {"kind": "external", "vocab_path": vocab_name, "vocab_size": cfg.vocab_size},
    }
    blob = json.dumps(header, separators=(",", ":")).encode()
    start = align_up(16 + len(blob))
    buf = bytearray(b"LAMO" + struct.pack("<IQ", 1, len(blob)) + blob)
    buf.extend(b"\0" * (start - len(buf)))
    for (_, t), e in zip(tensors, entries):
        buf.extend(b"\0" * (start + e["offset"] - len(buf)))
        buf.extend(t.numpy().astype("<f4").tobytes())
    buf.extend(b"\0" * (start + offset - len(buf)))
    path.write_bytes(bytes(buf))


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(0)
    cfg = GPT2Config(vocab_size=257, n_positions=32, n_embd=32, n_layer=2, n_head=4, initializer_range=0.2,
                     resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0, bos_token_id=256, eos_token_id=256)
    model = GPT2LMHeadModel(cfg).eval()
    vocab = byte_vocab()
    (out / "vocab.json").write_text(json.dumps(vocab, ensure_ascii=True, sort_keys=True, indent=0))
    write_checkpoint(out / "tiny-gpt2.lamo", cfg, lamo_tensors(model, cfg), "vocab.json")
    ids = list(PROMPT.encode())
    with torch.no_grad():
        logits = model(torch.tensor([ids])).logits[0]
    positions = []
    for row in logits[:16]:
        top = torch.topk(row, TOP)
        positions.append({"ids": top.indices.tolist(), "values": top.values.tolist()})
    fixture = {"source": "transformers GPT2LMHeadModel, random init, seed 0", "prompt": PROMPT,
               "token_ids": ids, "positions": positions}
    (out / "reference-logits.json").write_text(json.dumps(fixture, indent=1))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "fixtures")
