#!/usr/bin/env python3
"""Export torchvision classification models to ONNX fixtures.

Each model is exported at 1x3x224x224 (opset 12, BatchNormalization kept),
shape-annotated with onnx.shape_inference, then written twice:

  * <out>/full/<name>.onnx      weights inline (raw_data), full size
  * <out>/skeleton/<name>.onnx  every initializer moved to external data with
                                an explicit length and no data file; a few
                                hundred KB per model

Parameters are perturbed before export so that no two initializers hold
identical values (the exporter otherwise deduplicates them behind Identity
nodes).  A manifest.json with node/initializer counts is written alongside as
an independent reference for the Rust tests.

usage: export_models.py OUT_DIR [--full] [name ...]
"""
import argparse
import collections
import hashlib
import json
import os
import sys

import onnx
import onnx.shape_inference
import torch
import torchvision.models as tvm

MODELS = {
    "alexnet": lambda: tvm.alexnet(),
    "vgg16": lambda: tvm.vgg16(),
    "vgg19": lambda: tvm.vgg19(),
    "googlenet": lambda: tvm.googlenet(aux_logits=False, init_weights=True),
    "resnet18": lambda: tvm.resnet18(),
    "resnet34": lambda: tvm.resnet34(),
    "resnet50": lambda: tvm.resnet50(),
    "resnet101": lambda: tvm.resnet101(),
    "resnet152": lambda: tvm.resnet152(),
    "densenet121": lambda: tvm.densenet121(),
    "squeezenet1.0": lambda: tvm.squeezenet1_0(),
    "mobilenetv2": lambda: tvm.mobilenet_v2(),
    "shufflenetv2": lambda: tvm.shufflenet_v2_x1_0(),
    "efficientnet-b0": lambda: tvm.efficientnet_b0(),
}


def export(name, out_dir, keep_full):
    torch.manual_seed(0)
    model = MODELS[name]().eval()
    with torch.no_grad():
        for p in list(model.parameters()) + list(model.buffers()):
            if p.dtype.is_floating_point:
                p.add_(torch.rand_like(p) * 1e-3)
    x = torch.randn(1, 3, 224, 224)
    full_path = os.path.join(out_dir, "full", f"{name}.onnx")
    torch.onnx.export(
        model, x, full_path,
        opset_version=12,
        dynamo=False,
        training=torch.onnx.TrainingMode.PRESERVE,
        do_constant_folding=True,
        input_names=["data"],
        output_names=["output"],
    )
    proto = onnx.load(full_path)
    proto = onnx.shape_inference.infer_shapes(proto)
    onnx.save(proto, full_path)
    g = proto.graph

    sha = hashlib.sha256(open(full_path, "rb").read()).hexdigest()
    full_bytes = os.path.getsize(full_path)
    summary = {
        "ops": dict(sorted(collections.Counter(n.op_type for n in g.node).items())),
        "nodes": len(g.node),
        "initializers": len(g.initializer),
        "initializer_elements": sum(
            int(torch.tensor(list(t.dims) or [1]).prod()) for t in g.initializer),
        "value_infos": len(g.value_info),
        "full_file_bytes": full_bytes,
        "full_file_sha256": sha,
    }

    for t in g.initializer:
        length = len(t.raw_data)
        t.ClearField("raw_data")
        t.data_location = onnx.TensorProto.EXTERNAL
        del t.external_data[:]
        for k, v in (("location", f"{name}.weights"), ("offset", "0"), ("length", str(length))):
            e = t.external_data.add()
            e.key, e.value = k, v
    skel_path = os.path.join(out_dir, "skeleton", f"{name}.onnx")
    with open(skel_path, "wb") as f:
        f.write(proto.SerializeToString())

    if not keep_full:
        os.remove(full_path)
    return summary


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--full", action="store_true", help="keep full-weight exports")
    ap.add_argument("names", nargs="*")
    args = ap.parse_args()
    names = args.names or list(MODELS)
    os.makedirs(os.path.join(args.out_dir, "full"), exist_ok=True)
    os.makedirs(os.path.join(args.out_dir, "skeleton"), exist_ok=True)
    manifest_path = os.path.join(args.out_dir, "manifest.json")
    manifest = json.load(open(manifest_path)) if os.path.exists(manifest_path) else {}
    for name in names:
        print(f"exporting {name}", file=sys.stderr)
        manifest[name] = export(name, args.out_dir, args.full)
    with open(manifest_path, "w") as f:
        json.dump(dict(sorted(manifest.items())), f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
