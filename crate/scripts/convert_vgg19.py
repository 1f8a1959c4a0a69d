#!/usr/bin/env python3
"""Convert torchvision VGG-19 weights into the encoder weight archive.

    python scripts/convert_vgg19.py --out vgg19.ccpl
    python scripts/convert_vgg19.py --state-dict vgg19-dcbb9e9d.pth --out vgg19.ccpl

Writes conv1_1 .. conv4_1 as float32 plus ImageNet preprocessing metadata,
so the encoder normalises [0, 1] RGB input the way the weights expect.
"""

import argparse
import json
import struct

import numpy as np

# (archive name, index in torchvision's vgg19().features)
LAYERS = [
    ("conv1_1", 0),
    ("conv1_2", 2),
    ("conv2_1", 5),
    ("conv2_2", 7),
    ("conv3_1", 10),
    ("conv3_2", 12),
    ("conv3_3", 14),
    ("conv3_4", 16),
    ("conv4_1", 19),
]
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def load_state_dict(path):
    import torch

    if path:
        return torch.load(path, map_location="cpu")
    from torchvision.models import VGG19_Weights, vgg19

    return vgg19(weights=VGG19_Weights.IMAGENET1K_V1).state_dict()


def write_archive(path, tensors, metadata):
    entries, payload = [], bytearray()
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = data.tobytes()
        entries.append(
            {"name": name, "dtype": "f32", "shape": list(data.shape), "offset": len(payload), "length": len(raw)}
        )
        payload += raw
    manifest = json.dumps({"metadata": metadata, "tensors": entries}).encode()
    with open(path, "wb") as f:
        f.write(b"CCPLARCH")
        f.write(struct.pack("<IQ", 1, len(manifest)))
        f.write(manifest)
        f.write(payload)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--state-dict", help="local .pth file; downloads the torchvision weights if omitted")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    sd = load_state_dict(args.state_dict)
    tensors = {}
    for name, idx in LAYERS:
        tensors[f"{name}.weight"] = sd[f"features.{idx}.weight"].numpy()
        tensors[f"{name}.bias"] = sd[f"features.{idx}.bias"].numpy()
    metadata = {
        "kind": "encoder",
        "source": "torchvision vgg19 IMAGENET1K_V1",
        "preprocess.mean": ",".join(str(v) for v in IMAGENET_MEAN),
        "preprocess.std": ",".join(str(v) for v in IMAGENET_STD),
    }
    write_archive(args.out, tensors, metadata)
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
