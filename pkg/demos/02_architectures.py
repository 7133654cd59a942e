"""Shapes and receptive fields of the three networks.

Prints the intermediate maps of the semi-overcomplete encoder, the latent
sizes of both auto-encoders and the analytic receptive fields, which show
the overcomplete branch seeing a smaller input window than the bottleneck.
"""

import argparse
from dataclasses import replace

import torch

from vesselprior.architectures import ModelConfig, build_model, receptive_fields
from vesselprior.errors import ConfigError


def n_params(model):
    return sum(p.numel() for p in model.parameters())


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--depth", type=int, default=4)
    parser.add_argument("--base", type=int, default=8)
    args = parser.parse_args()

    cfg = ModelConfig(depth=args.depth, base_channels=args.base, input_size=(args.size, args.size))
    y = (torch.rand(1, 1, args.size, args.size) > 0.9).float()

    unet = build_model("unet", cfg).eval()
    print(f"U-Net: {n_params(unet)} parameters, output {tuple(unet(y).shape)}")

    try:
        build_model("cae", cfg)
    except ConfigError as exc:
        print(f"CAE with the default widths rejected: {exc}")
    cfg = replace(cfg, latent_channels=16)
    cae = build_model("cae", cfg).eval()
    print(f"CAE: {n_params(cae)} parameters, latent length {len(cae.encode(y))} "
          f"for {y.numel()} input pixels")

    socae = build_model("socae", cfg).eval()
    print(f"S-OCAE: {n_params(socae)} parameters")
    with torch.no_grad():
        for name, fmap in socae.encoder_features(y).items():
            print(f"  {name:<20} {tuple(fmap.shape)}")

    print("receptive fields (input pixels):")
    for name, size in receptive_fields(cfg).items():
        print(f"  {name:<20} {size:g}")


if __name__ == "__main__":
    main()
