"""Write the repeated-block workload: ``layers`` x (matvec, silu) on a 64-wide vector."""

import argparse
import sys


def render(layers: int, width: int, tile: int) -> str:
    out = [f"# {layers} repeated layers: h_(l+1) = silu(W_l @ h_l). Written by scripts/make_layers.py.",
           "tensors:",
           f"  - {{name: h0, shape: [{width}, 1], tile: [{tile}, 1]}}"]
    ops = ["operators:"]
    for l in range(layers):
        # same declaration order per layer keeps tile indices in arithmetic progression
        out.append(f"  - {{name: W{l}, shape: [{width}, {width}], tile: [{tile}, {tile}]}}")
        out.append(f"  - {{name: y{l}, shape: [{width}, 1], tile: [{tile}, 1], init: zeros}}")
        out.append(f"  - {{name: h{l + 1}, shape: [{width}, 1], tile: [{tile}, 1], init: zeros}}")
        ops.append(f"  - {{id: mv{l}, kind: MATVEC, inputs: [W{l}, h{l}], outputs: [y{l}]}}")
        ops.append(f"  - {{id: act{l}, kind: ELEMWISE, inputs: [y{l}], outputs: [h{l + 1}],"
                   f" attrs: {{fn: silu}}}}")
    return "\n".join(out + ops) + "\n"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--layers", type=int, default=32)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--tile", type=int, default=16)
    ap.add_argument("-o", "--out", default="-")
    args = ap.parse_args(argv)
    text = render(args.layers, args.width, args.tile)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
