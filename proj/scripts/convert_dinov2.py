#!/usr/bin/env python3
"""Convert a DINOv2 checkpoint into the dinolab weight store format.

Either pulls a published model through torch.hub or reads a local .pth file:

    python scripts/convert_dinov2.py --model dinov2_vitb14_reg --out dinov2-vitb14-reg.dlts
    python scripts/convert_dinov2.py --checkpoint weights.pth --patch-size 14 --out backbone.dlts

Drop the output into $DINOLAB_CACHE and reference it from a config as
encoder.weight_id (with or without the .dlts suffix).
"""

import argparse
import math
import struct
import sys

import numpy as np

MAGIC = b"DLTS"
VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def write_store(path, meta, tensors):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta)))
        for key in sorted(meta):
            for s in (key, str(meta[key])):
                raw = s.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", 0, arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_state_dict(args):
    import torch

    if args.checkpoint:
        blob = torch.load(args.checkpoint, map_location="cpu")
        for key in ("state_dict", "model", "teacher"):
            if isinstance(blob, dict) and key in blob:
                blob = blob[key]
        sd = {k.removeprefix("backbone."): v for k, v in blob.items()}
    else:
        model = torch.hub.load("facebookresearch/dinov2", args.model)
        sd = model.state_dict()
    return {k: v.float().numpy() for k, v in sd.items()}


def convert(sd, args):
    depth = 1 + max(int(k.split(".")[1]) for k in sd if k.startswith("blocks."))
    embed_dim = sd["cls_token"].shape[-1]
    patch_w = sd["patch_embed.proj.weight"]
    patch_size = args.patch_size or patch_w.shape[-1]
    num_heads = args.num_heads or embed_dim // 64

    pos = sd["pos_embed"].reshape(-1, embed_dim)
    grid = pos.shape[0] - 1
    pos_grid = int(math.isqrt(grid))
    if pos_grid * pos_grid != grid:
        raise SystemExit(f"positional embedding holds {grid} patch slots, not a square grid")

    tensors = {
        "patch_embed.weight": patch_w.reshape(embed_dim, -1),
        "patch_embed.bias": sd["patch_embed.proj.bias"],
        "cls_token": sd["cls_token"].reshape(embed_dim),
        "pos_embed.cls": pos[0],
        "pos_embed.patches": pos[1:],
    }

    registers = 0
    if "register_tokens" in sd:
        reg = sd["register_tokens"].reshape(-1, embed_dim)
        registers = reg.shape[0]
        tensors["reg_tokens"] = reg

    rename = {
        "norm1.weight": "ln1.weight",
        "norm1.bias": "ln1.bias",
        "norm2.weight": "ln2.weight",
        "norm2.bias": "ln2.bias",
        "attn.qkv.weight": "attn.qkv.weight",
        "attn.qkv.bias": "attn.qkv.bias",
        "attn.proj.weight": "attn.proj.weight",
        "attn.proj.bias": "attn.proj.bias",
        "mlp.fc1.weight": "mlp.fc1.weight",
        "mlp.fc1.bias": "mlp.fc1.bias",
        "mlp.fc2.weight": "mlp.fc2.weight",
        "mlp.fc2.bias": "mlp.fc2.bias",
        "ls1.gamma": "ls1.gamma",
        "ls2.gamma": "ls2.gamma",
    }
    for i in range(depth):
        for src, dst in rename.items():
            key = f"blocks.{i}.{src}"
            if key in sd:
                tensors[f"blocks.{i}.{dst}"] = sd[key]
            elif not src.startswith("ls"):
                raise SystemExit(f"checkpoint is missing {key}")

    meta = {
        "depth": depth,
        "embed_dim": embed_dim,
        "patch_size": patch_size,
        "num_heads": num_heads,
        "num_register_tokens": registers,
        "pos_grid": pos_grid,
        "weight_id": args.weight_id or (args.model or "converted").replace("_", "-"),
        "image_mean": ",".join(f"{v}" for v in IMAGENET_MEAN),
        "image_std": ",".join(f"{v}" for v in IMAGENET_STD),
        "activation": "gelu_erf",
    }
    return meta, tensors


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="torch.hub name, e.g. dinov2_vitb14_reg")
    src.add_argument("--checkpoint", help="local .pth state dict")
    ap.add_argument("--out", required=True, help="output .dlts path")
    ap.add_argument("--weight-id", help="identifier stored in the weights (default: model name)")
    ap.add_argument("--patch-size", type=int, help="override when absent from the checkpoint")
    ap.add_argument("--num-heads", type=int, help="override the embed_dim/64 default")
    args = ap.parse_args()

    sd = load_state_dict(args)
    meta, tensors = convert(sd, args)
    write_store(args.out, meta, tensors)
    total = sum(t.size for t in tensors.values())
    print(f"wrote {args.out}: depth {meta['depth']}, dim {meta['embed_dim']}, "
          f"{len(tensors)} tensors, {total / 1e6:.1f}M parameters")


if __name__ == "__main__":
    sys.exit(main())
