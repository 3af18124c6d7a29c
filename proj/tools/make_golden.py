#!/usr/bin/env python3
"""Generates the tiny golden checkpoint plus frozen reference outputs.

The reference implementation is HuggingFace's GPT-2 run in float64, so the
C++ forward/backward can be checked against an independent implementation.
Outputs land in tests/data/golden/ and are committed; rerun only if the
checkpoint format changes:

    python3 tools/make_golden.py
"""

import json
from pathlib import Path

import torch
from transformers import GPT2Config, GPT2LMHeadModel

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "golden"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def tensor_names(n_layer):
    names = [("wte.weight", "transformer.wte.weight"),
             ("wpe.weight", "transformer.wpe.weight")]
    for i in range(n_layer):
        for suf in ("ln_1.weight", "ln_1.bias", "attn.c_attn.weight", "attn.c_attn.bias",
                    "attn.c_proj.weight", "attn.c_proj.bias", "ln_2.weight", "ln_2.bias",
                    "mlp.c_fc.weight", "mlp.c_fc.bias", "mlp.c_proj.weight", "mlp.c_proj.bias"):
            names.append((f"h.{i}.{suf}", f"transformer.h.{i}.{suf}"))
    names += [("ln_f.weight", "transformer.ln_f.weight"),
              ("ln_f.bias", "transformer.ln_f.bias")]
    return names


def save_checkpoint(model, cfg, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    sd = model.state_dict()
    tensors = {}
    for name, hf_name in tensor_names(cfg["n_layer"]):
        t = sd[hf_name].detach().to(torch.float32).contiguous()
        raw = t.numpy().tobytes()
        (out_dir / f"{name}.bin").write_bytes(raw)
        tensors[name] = {"file": f"{name}.bin", "shape": list(t.shape),
                         "fnv64": f"{fnv1a64(raw):016x}"}
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")
    manifest = {"model_id": cfg["model_id"], "dtype": "f32", "tensors": tensors}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def main():
    torch.manual_seed(20250825)
    cfg = {"model_id": "golden2", "n_layer": 2, "n_head": 2, "n_embd": 32,
           "n_ctx": 64, "vocab_size": 97, "ln_eps": 1e-5}
    hf_config = GPT2Config(
        vocab_size=cfg["vocab_size"], n_positions=cfg["n_ctx"], n_embd=cfg["n_embd"],
        n_layer=cfg["n_layer"], n_head=cfg["n_head"], activation_function="gelu_new",
        resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0,
        layer_norm_epsilon=cfg["ln_eps"])
    hf_config._attn_implementation = "eager"
    model = GPT2LMHeadModel(hf_config)
    with torch.no_grad():
        for blk in model.transformer.h:
            blk.attn.c_attn.weight.mul_(3.0)  # sharper attention patterns
    save_checkpoint(model, cfg, OUT / "checkpoint")
    model.double().eval()

    raw_final = {}
    mlp_outs = {}

    def keep(store, key):
        def hook(mod, inp, out):
            store[key] = out[0] if isinstance(out, tuple) else out
        return hook

    model.transformer.h[-1].register_forward_hook(keep(raw_final, "x"))
    for i, blk in enumerate(model.transformer.h):
        blk.mlp.register_forward_hook(keep(mlp_outs, i))

    gen = torch.Generator().manual_seed(7)
    tokens = torch.randint(0, cfg["vocab_size"], (12,), generator=gen).tolist()
    ids = torch.tensor([tokens])
    out = model(ids, output_hidden_states=True, output_attentions=True)
    hs = out.hidden_states  # note: the last entry has ln_f applied
    x_final = raw_final["x"]  # snapshot before later forwards refire the hook
    resid = {"0": hs[0][0], "1": hs[1][0], "2": x_final[0]}

    cases = {"config": cfg, "forward": {
        "tokens": tokens,
        "resid": {k: v.tolist() for k, v in resid.items()},
        "attn": {str(b): out.attentions[b][0].tolist() for b in range(cfg["n_layer"])},
        "mlp_out": {str(b): mlp_outs[b][0].tolist() for b in range(cfg["n_layer"])},
        "logits": out.logits[0].tolist(),
    }}

    one = model(torch.tensor([[tokens[3]]]), output_hidden_states=True)
    cases["forward_t1"] = {"tokens": [tokens[3]],
                           "resid0": one.hidden_states[0][0].tolist(),
                           "logits": one.logits[0].tolist()}

    # probe-score gradients at two residual streams
    w = torch.randn(cfg["n_embd"], dtype=torch.float64, generator=gen)
    b = 0.3
    t_star = 7
    s2 = (x_final[0, t_star] * w).sum() + b
    g2 = torch.autograd.grad(s2, [hs[0], hs[1]], retain_graph=True)
    s1 = (hs[1][0, t_star] * w).sum() + b
    g1 = torch.autograd.grad(s1, [hs[0]], retain_graph=True)
    cases["grads"] = {
        "tokens": tokens, "t_star": t_star, "w": w.tolist(), "b": b,
        "layer2": {"score": float(s2), "g0": g2[0][0].tolist(), "g1": g2[1][0].tolist()},
        "layer1": {"score": float(s1), "g0": g1[0][0].tolist()},
    }

    def f64_lm_loss(logits):
        # the bundled loss helper downcasts to f32; recompute in f64
        lp = torch.log_softmax(logits[0, :-1], dim=-1)
        tgt = ids[0, 1:]
        return -lp[torch.arange(tgt.numel()), tgt].mean()

    loss = f64_lm_loss(model(ids).logits)
    cases["loss"] = {"tokens": tokens, "value": float(loss)}

    prompt = tokens[:5]
    toks = list(prompt)
    with torch.no_grad():
        for _ in range(10):
            nxt = int(model(torch.tensor([toks])).logits[0, -1].argmax())
            toks.append(nxt)
    cases["greedy"] = {"prompt": prompt, "max_new_tokens": 10, "output": toks}

    # one AdamW step on the LM loss; must come last (mutates the model)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3, betas=(0.9, 0.999),
                            eps=1e-8, weight_decay=0.1)
    model.train()
    f64_lm_loss(model(ids).logits).backward()
    opt.step()
    cases["adamw"] = {"tokens": tokens, "lr": 1e-3, "weight_decay": 0.1}
    save_checkpoint(model, cfg, OUT / "adamw_after")

    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "cases.json").write_text(json.dumps(cases) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
