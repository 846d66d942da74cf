#!/usr/bin/env python3
"""Convert PyTorch checkpoints into MMRW weight files.

  convert_weights.py teacher --arch wide_resnet50_2 --out wrn50.bin [--checkpoint file.pth]
  convert_weights.py encoder --checkpoint mae_pretrain_vit_base.pth --out vit_b_mae.bin

Teacher: torchvision resnet18 / wide_resnet50_2, batch norm folded into the
convolutions. Without --checkpoint the torchvision ImageNet weights are used.
Encoder: an MAE ViT-B checkpoint (the "model" entry when present); the decoder
and fixed position table are dropped.
"""

import argparse
import json
import struct

import numpy as np
import torch

MAGIC = b"MMRW0001"


def write_mmrw(path, params, meta):
    header = {"params": [], "meta": meta}
    offset = 0
    blobs = []
    for name, arr in params:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        header["params"].append({"name": name, "shape": list(arr.shape), "offset": offset, "size": int(arr.size)})
        offset += arr.size
        blobs.append(arr.reshape(-1))
    header["count"] = offset
    text = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for b in blobs:
            f.write(b.tobytes())


def fold(conv_w, bn, prefix, sd):
    g = sd[bn + ".weight"].double()
    scale = g / torch.sqrt(sd[bn + ".running_var"].double() + 1e-5)
    w = sd[conv_w].double() * scale[:, None, None, None]
    b = sd[bn + ".bias"].double() - sd[bn + ".running_mean"].double() * scale
    # torch [cout, cin, kh, kw] -> [kh, kw, cin, cout]
    return [(prefix + ".weight", w.permute(2, 3, 1, 0).numpy()), (prefix + ".bias", b.numpy())]


def convert_teacher(args):
    import torchvision

    ctor = getattr(torchvision.models, args.arch)
    if args.checkpoint:
        model = ctor(weights=None)
        model.load_state_dict(torch.load(args.checkpoint, map_location="cpu"))
    else:
        model = ctor(weights="DEFAULT")
    sd = model.state_dict()
    bottleneck = args.arch != "resnet18"
    params = fold("conv1.weight", "bn1", "conv1", sd)
    for stage, blocks in ((1, 3 if bottleneck else 2), (2, 4 if bottleneck else 2), (3, 6 if bottleneck else 2)):
        for b in range(blocks):
            p = f"layer{stage}.{b}"
            for c in range(1, 4 if bottleneck else 3):
                params += fold(f"{p}.conv{c}.weight", f"{p}.bn{c}", f"{p}.conv{c}", sd)
            if f"{p}.downsample.0.weight" in sd:
                params += fold(f"{p}.downsample.0.weight", f"{p}.downsample.1", f"{p}.downsample", sd)
    family = "wideresnet50" if bottleneck else "resnet18"
    write_mmrw(args.out, params, {"kind": "teacher", "family": family, "source": args.arch})


def convert_encoder(args):
    sd = torch.load(args.checkpoint, map_location="cpu")
    sd = sd.get("model", sd)
    params = []
    w = sd["patch_embed.proj.weight"]  # [d, 3, p, p] -> rows ordered (py, px, c)
    d, _, p, _ = w.shape
    params.append(("patch_embed.weight", w.permute(2, 3, 1, 0).reshape(p * p * 3, d).numpy()))
    params.append(("patch_embed.bias", sd["patch_embed.proj.bias"].numpy()))
    if "cls_token" in sd:
        params.append(("cls_token", sd["cls_token"].reshape(-1).numpy()))
    depth = 1 + max(int(k.split(".")[1]) for k in sd if k.startswith("blocks."))
    for i in range(depth):
        p_ = f"blocks.{i}"
        for n in ("norm1", "norm2"):
            params += [(f"{p_}.{n}.weight", sd[f"{p_}.{n}.weight"].numpy()), (f"{p_}.{n}.bias", sd[f"{p_}.{n}.bias"].numpy())]
        for n in ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"):
            # torch Linear [out, in] -> [in, out]
            params += [(f"{p_}.{n}.weight", sd[f"{p_}.{n}.weight"].t().numpy()), (f"{p_}.{n}.bias", sd[f"{p_}.{n}.bias"].numpy())]
    params += [("norm.weight", sd["norm.weight"].numpy()), ("norm.bias", sd["norm.bias"].numpy())]
    write_mmrw(args.out, params, {"kind": "encoder", "source": args.checkpoint})


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="what", required=True)
    t = sub.add_parser("teacher")
    t.add_argument("--arch", choices=["resnet18", "wide_resnet50_2"], default="wide_resnet50_2")
    t.add_argument("--checkpoint")
    t.add_argument("--out", required=True)
    e = sub.add_parser("encoder")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    args = ap.parse_args()
    (convert_teacher if args.what == "teacher" else convert_encoder)(args)


if __name__ == "__main__":
    main()
