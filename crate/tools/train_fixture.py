"""Train the bundled desk-scale CNN and export it as an 8-bit model file.

The network is trained in float, then with fake-quantized weights and
activations (straight-through estimator), and exported with per-tensor
symmetric weight scales, integer biases and one requantization multiplier
per layer, in the `wselect-model` v1 JSON layout.

The architecture is a comma-separated list: `c<out>k<k>[p<pad>]` is a conv
followed by ReLU, `m<k>` a max pool. A dense layer to the classes is
always appended.

Usage:
    cargo run -p wselect --example synthetic_dataset -- /tmp/wsdata
    python3 tools/train_fixture.py /tmp/wsdata model.json [arch] [epochs]
    cargo run -p wselect --example evaluate_model -- model.json /tmp/wsdata/val.bin canonical.json
"""

import base64
import json
import re
import struct
import sys

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

INPUT_SCALE = 1.0 / 80.0  # synthetic pixels are round(v * 80)
DEFAULT_ARCH = "c16k3,m2,c32k3,c64k2,m2"


def load_bin(path):
    raw = open(path, "rb").read()
    n, c, h, w = struct.unpack("<4I", raw[:16])
    px = np.frombuffer(raw[16 : 16 + n * c * h * w], dtype=np.int8).reshape(n, c, h, w)
    labels = np.frombuffer(raw[16 + n * c * h * w :], dtype=np.uint8)
    return px.astype(np.float32), labels.astype(np.int64), (c, h, w)


def fake_quant(x, scale):
    q = torch.clamp(torch.round(x / scale), -128, 127) * scale
    return x + (q - x).detach()


def parse_arch(arch):
    ops = []
    for tok in arch.split(","):
        m = re.fullmatch(r"c(\d+)k(\d+)(?:p(\d+))?", tok)
        if m:
            ops.append(("conv", int(m[1]), int(m[2]), int(m[3] or 0)))
            continue
        m = re.fullmatch(r"m(\d+)", tok)
        if m:
            ops.append(("pool", int(m[1])))
            continue
        raise SystemExit(f"bad architecture token {tok!r}")
    return ops


class Net(nn.Module):
    def __init__(self, ops, in_shape, classes=10):
        super().__init__()
        self.ops = ops
        c, h, w = in_shape
        self.convs = nn.ModuleList()
        for op in ops:
            if op[0] == "conv":
                _, out, k, pad = op
                self.convs.append(nn.Conv2d(c, out, k, padding=pad))
                c, h, w = out, h + 2 * pad - k + 1, w + 2 * pad - k + 1
            else:
                h, w = h // op[1], w // op[1]
        self.fc = nn.Linear(c * h * w, classes)
        self.act_scales = None  # output scale of each conv once calibrated

    def wq(self, layer):
        if self.act_scales is None:
            return layer.weight
        s = layer.weight.detach().abs().max() / 127.0
        return fake_quant(layer.weight, s)

    def forward(self, x, record=None):
        x = x * INPUT_SCALE
        ci = 0
        for op in self.ops:
            if op[0] == "conv":
                conv = self.convs[ci]
                x = F.conv2d(x, self.wq(conv), conv.bias, padding=conv.padding)
                if record is not None:
                    record.append(x)
                if self.act_scales is not None:
                    x = fake_quant(x, self.act_scales[ci])
                x = F.relu(x)
                ci += 1
            else:
                x = F.max_pool2d(x, op[1])
        return F.linear(x.flatten(1), self.wq(self.fc), self.fc.bias)


def accuracy(net, x, y):
    with torch.no_grad():
        return (net(x).argmax(1) == y).float().mean().item()


def train(net, x, y, epochs, lr):
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = x.shape[0]
    for _ in range(epochs):
        perm = torch.randperm(n)
        for i in range(0, n, 64):
            idx = perm[i : i + 64]
            opt.zero_grad()
            loss = F.cross_entropy(net(x[idx]), y[idx])
            loss.backward()
            opt.step()


def calibrate(net, x):
    rec = []
    with torch.no_grad():
        net(x, record=rec)
    return [float(torch.quantile(r.abs().flatten()[:200000], 0.9999)) / 127.0 for r in rec]


def b64(a):
    return base64.b64encode(a.astype(np.int8).tobytes()).decode()


def quantize(weight):
    w = weight.detach().numpy()
    s_w = np.abs(w).max() / 127.0
    return np.clip(np.round(w / s_w), -128, 127).astype(np.int8), s_w


def export(net, in_shape, path):
    layers = []
    s_in = INPUT_SCALE
    ci = 0
    for op in net.ops:
        if op[0] == "conv":
            conv = net.convs[ci]
            w_int, s_w = quantize(conv.weight)
            acc_scale = s_w * s_in
            s_out = net.act_scales[ci]
            layers.append(
                {
                    "type": "conv",
                    "c_in": conv.in_channels,
                    "c_out": conv.out_channels,
                    "k": conv.kernel_size[0],
                    "stride": 1,
                    "pad": conv.padding[0],
                    "scale": float(acc_scale / s_out),
                    "weights": b64(w_int.flatten()),
                    "bias": [int(b) for b in np.round(conv.bias.detach().numpy() / acc_scale)],
                    "mask": base64.b64encode(np.ones(w_int.size, dtype=np.uint8).tobytes()).decode(),
                    "candidate_set": None,
                }
            )
            layers.append({"type": "relu"})
            s_in = s_out
            ci += 1
        else:
            layers.append({"type": "maxpool", "k": op[1], "stride": op[1]})
    w_int, s_w = quantize(net.fc.weight)
    acc_scale = s_w * s_in
    layers.append(
        {
            "type": "dense",
            "n_in": net.fc.in_features,
            "n_out": net.fc.out_features,
            "scale": float(acc_scale),
            "weights": b64(w_int.flatten()),
            "bias": [int(b) for b in np.round(net.fc.bias.detach().numpy() / acc_scale)],
        }
    )
    doc = {
        "format": "wselect-model",
        "version": 1,
        "name": "desk-cnn",
        "input_shape": list(in_shape),
        "num_classes": net.fc.out_features,
        "layers": layers,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def main():
    data_dir, out = sys.argv[1], sys.argv[2]
    arch = sys.argv[3] if len(sys.argv) > 3 else DEFAULT_ARCH
    epochs = int(sys.argv[4]) if len(sys.argv) > 4 else 12
    torch.manual_seed(0)
    np.random.seed(0)
    xt, yt, shape = load_bin(f"{data_dir}/train.bin")
    xv, yv, _ = load_bin(f"{data_dir}/val.bin")
    xt, yt, xv, yv = map(torch.tensor, (xt, yt, xv, yv))
    net = Net(parse_arch(arch), shape)
    train(net, xt, yt, epochs=epochs, lr=2e-3)
    print(f"float val accuracy {accuracy(net, xv, yv):.4f}")
    net.act_scales = calibrate(net, xt[:2000])
    train(net, xt, yt, epochs=max(2, epochs // 3), lr=3e-4)
    net.act_scales = calibrate(net, xt[:2000])
    print(f"fake-quant val accuracy {accuracy(net, xv, yv):.4f}")
    export(net, shape, out)


if __name__ == "__main__":
    main()
