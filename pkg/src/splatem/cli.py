"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or invalid
input files, inconsistent arguments).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import io

log = logging.getLogger("splatem")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
PATH_KEYS = ("particles", "metadata", "model")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _load_particles(particles, metadata):
    from .trainer import ParticleDataset

    images, pixel_size = io.read_mrc(particles)
    rows = io.read_meta(metadata)
    if len(rows) != len(images):
        raise ValueError(f"{metadata} lists {len(rows)} particles but {particles} "
                         f"holds {len(images)} images")
    poses, ctfs = io.rows_to_particles(rows)
    return ParticleDataset(images, poses, ctfs, pixel_size), rows


def _read_volumes(paths):
    """Volumes from MRC files or from every ``*.mrc`` in given directories."""
    files = []
    for p in paths:
        if os.path.isdir(p):
            files += sorted(os.path.join(p, f) for f in os.listdir(p) if f.endswith(".mrc"))
        else:
            files.append(p)
    if not files:
        raise ValueError("no volume files given")
    return [io.read_mrc(f)[0] for f in files]


def _parse_z(text, dim):
    z = np.array([float(v) for v in text.split(",")])
    if z.size != dim:
        raise ValueError(f"--z needs {dim} comma-separated values, got {z.size}")
    return z


# ---------------------------------------------------------------- commands

def cmd_simulate(args):
    from .datagen import ToySpec, simulate_dataset

    spec = ToySpec(kind=args.kind, n_conformations=args.n_conformations,
                   n_particles=args.n_particles, box_size=args.box_size,
                   pixel_size=args.pixel_size, snr=args.snr, ctf_enabled=not args.no_ctf,
                   seed=args.seed)
    ds = simulate_dataset(spec)
    out = args.out
    os.makedirs(os.path.join(out, "gt_volumes"), exist_ok=True)
    io.write_mrc(os.path.join(out, "particles.mrcs"), ds.images, spec.pixel_size, is_stack=True)
    rows = io.particles_to_rows(ds.meta.poses, ds.meta.ctfs, ds.meta.gt_conformation,
                                ds.meta.gt_angle)
    io.write_meta(os.path.join(out, "particles.csv"), rows)
    for k, v in enumerate(ds.gt_volumes):
        io.write_mrc(os.path.join(out, "gt_volumes", f"gt_{k:03d}.mrc"), v, spec.pixel_size)
    from .datagen import consensus_volume
    io.write_mrc(os.path.join(out, "consensus.mrc"),
                 consensus_volume(ds.gt_volumes, ds.meta.gt_conformation), spec.pixel_size)
    io.write_json(os.path.join(out, "manifest.json"), {
        "command": "simulate",
        "spec": {k: v for k, v in vars(spec).items()},
        "noise_sigma": ds.noise_sigma,
        "files": ["particles.mrcs", "particles.csv", "consensus.mrc", "gt_volumes/"],
    })
    print(f"wrote {len(ds.images)} particles and {len(ds.gt_volumes)} volumes to {out}")


def cmd_init(args):
    from .datagen import init_gaussians_from_volume

    volume, pixel_size = io.read_mrc(args.volume)
    contour = args.contour
    if args.contour_frac is not None:
        contour = args.contour_frac * float(volume.max())
    if contour is None:
        raise UsageError("init needs --contour or --contour-frac")
    model = init_gaussians_from_volume(volume, contour, args.interval, pixel_size)
    io.save_model(args.out, model)
    print(f"initialized {len(model)} Gaussians -> {args.out}")


def cmd_train(args):
    from .trainer import train

    config, extras = io.read_config(args.config, PATH_KEYS)
    for key in PATH_KEYS:
        if getattr(args, key):
            extras[key] = getattr(args, key)
    if args.epochs is not None:
        config.epochs = args.epochs
    missing = [k for k in PATH_KEYS if k not in extras]
    if missing:
        raise UsageError(f"missing input path(s): {', '.join(missing)} "
                         "(set in the config file or on the command line)")
    base = os.path.dirname(os.path.abspath(args.config))
    paths = {k: os.path.join(base, v) for k, v in extras.items()}
    dataset, _ = _load_particles(paths["particles"], paths["metadata"])
    model = io.load_model(paths["model"])
    state = None
    if args.resume:
        state, config_ckpt, _ = io.load_checkpoint(args.resume)
        config_ckpt.epochs = config.epochs
        config = config_ckpt
    os.makedirs(args.out, exist_ok=True)
    state, latents = train(dataset, model, config, state=state, out_dir=args.out)
    io.write_csv(os.path.join(args.out, "latents.csv"),
                 [f"z{k}" for k in range(latents.shape[1])], latents)
    io.write_config(os.path.join(args.out, "config.txt"), config,
                    {k: os.path.relpath(v, os.path.abspath(args.out)) for k, v in paths.items()})
    io.write_json(os.path.join(args.out, "manifest.json"), {
        "command": "train",
        "epochs": state.epoch,
        "files": ["checkpoint_final.ckpt", "loss_history.csv", "latents.csv", "config.txt"],
    })
    print(f"trained {state.epoch} epochs -> {args.out}")


def cmd_analyze(args):
    from .analysis import decode_volume_at, kmeans, pc_traversal, pca
    from .net import gaussian_encode
    from .trainer import extract_latents

    state, config, model = io.load_checkpoint(args.checkpoint)
    dataset, _ = _load_particles(args.particles, args.metadata)
    latents = extract_latents(state, dataset)
    if args.k > len(latents):
        raise ValueError(f"--k {args.k} exceeds the number of particles ({len(latents)})")
    out = args.out
    os.makedirs(os.path.join(out, "volumes"), exist_ok=True)
    zcols = [f"z{k}" for k in range(latents.shape[1])]
    io.write_csv(os.path.join(out, "latents.csv"), zcols, latents)

    clusters = kmeans(latents, args.k, args.seed)
    io.write_csv(os.path.join(out, "kmeans_labels.csv"), ["particle_index", "cluster"],
                 list(enumerate(clusters.assignments.tolist())))
    io.write_csv(os.path.join(out, "kmeans_centers.csv"), zcols, clusters.centers)

    comps, variances, mean = pca(latents)
    proj = (latents - mean) @ comps.T
    io.write_csv(os.path.join(out, "pca_projection.csv"),
                 [f"pc{k + 1}" for k in range(proj.shape[1])], proj)
    io.write_csv(os.path.join(out, "pca_variance.csv"), ["component", "variance"],
                 [(k + 1, v) for k, v in enumerate(variances)])
    second = proj[:, 1] if proj.shape[1] > 1 else np.zeros(len(proj))
    io.write_scatter_svg(os.path.join(out, "latents_pca.svg"),
                         np.column_stack([proj[:, 0], second]), clusters.assignments,
                         title=f"latents, k-means K={args.k}")

    emb, _ = gaussian_encode(state.net, model)
    files = []
    for k, c in enumerate(clusters.centers):
        v = decode_volume_at(state.net, c, model, config.flags, config.truncate, emb)
        name = f"volumes/cluster_{k:03d}.mrc"
        io.write_mrc(os.path.join(out, name), v, model.pixel_size)
        files.append(name)
    for k, z in enumerate(pc_traversal(latents, args.pc_steps)):
        v = decode_volume_at(state.net, z, model, config.flags, config.truncate, emb)
        name = f"volumes/pc1_{k:03d}.mrc"
        io.write_mrc(os.path.join(out, name), v, model.pixel_size)
        files.append(name)
    io.write_json(os.path.join(out, "manifest.json"), {
        "command": "analyze",
        "k": args.k,
        "files": ["latents.csv", "kmeans_labels.csv", "kmeans_centers.csv",
                  "pca_projection.csv", "pca_variance.csv", "latents_pca.svg"] + files,
    })
    print(f"analysis of {len(latents)} particles -> {out}")


def cmd_metrics(args):
    from .analysis import cluster_fsc, sample_fsc
    from .metrics import ensemble_basis, fsc, fsc_auc, pcv
    from .trainer import extract_latents

    if args.mode == "fsc":
        a, _ = io.read_mrc(args.a)
        b, _ = io.read_mrc(args.b)
        curve = fsc(a, b)
        print("shell,fsc")
        for r, c in zip(curve.radii, curve.correlations):
            print(f"{r},{c:.6f}")
        print(f"auc,{fsc_auc(curve):.6f}")
    elif args.mode == "pcv":
        ref = ensemble_basis(_read_volumes(args.reference), args.rank)
        test = ensemble_basis(_read_volumes(args.test), args.rank)
        print(f"pcv,{pcv(ref, test):.6f}")
    else:
        state, config, model = io.load_checkpoint(args.checkpoint)
        dataset, _ = _load_particles(args.particles, args.metadata)
        gt = _read_volumes(args.gt)
        latents = extract_latents(state, dataset)
        if args.mode == "sample-fsc":
            res = sample_fsc(state.net, model, latents, args.k, gt, config.flags, args.seed)
        else:
            res = cluster_fsc(dataset, latents, args.k, gt, args.seed)
        print("cluster,score,best_gt")
        for k, (s, b) in enumerate(zip(res.scores, res.best_match)):
            print(f"{k},{s:.6f},{b}")
        print(f"median,{np.nanmedian(res.scores):.6f}")


def cmd_map_atoms(args):
    from .analysis import map_to_atoms
    from .net import decode_deformation, gaussian_encode
    from .trainer import extract_latents

    state, config, model = io.load_checkpoint(args.checkpoint)
    if (args.z is None) == (args.particle is None):
        raise UsageError("map-atoms needs exactly one of --z or --particle")
    if args.z is not None:
        z = _parse_z(args.z, state.net.config.latent_dim)
    else:
        if not (args.particles and args.metadata):
            raise UsageError("--particle requires --particles and --metadata")
        dataset, _ = _load_particles(args.particles, args.metadata)
        if not 0 <= args.particle < len(dataset):
            raise ValueError(f"--particle {args.particle} out of range")
        z = extract_latents(state, dataset.subset([args.particle]))[0]
    atoms = io.read_pdb_coords(args.pdb)
    emb, _ = gaussian_encode(state.net, model)
    deformation, _ = decode_deformation(state.net, z, emb, config.flags)
    moved = map_to_atoms(model, deformation, atoms)
    io.write_pdb_coords(args.out, moved, args.pdb)
    print(f"mapped {len(moved)} atoms -> {args.out}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatem", description="Gaussian-based heterogeneous reconstruction toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic particle dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", default="dihedral_1d", choices=["dihedral_1d", "two_state_composition"])
    s.add_argument("--n-particles", type=int, default=2000)
    s.add_argument("--n-conformations", type=int, default=100)
    s.add_argument("--box-size", type=int, default=64)
    s.add_argument("--pixel-size", type=float, default=3.0)
    s.add_argument("--snr", type=float, default=0.5)
    s.add_argument("--no-ctf", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("init", help="place consensus Gaussians from a map")
    s.add_argument("--volume", required=True)
    s.add_argument("--contour", type=float)
    s.add_argument("--contour-frac", type=float, help="contour as a fraction of the map maximum")
    s.add_argument("--interval", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", help="train the deformation network")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--particles")
    s.add_argument("--metadata")
    s.add_argument("--model")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("analyze", help="latent clustering, PCA and decoded volumes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--particles", required=True)
    s.add_argument("--metadata", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--pc-steps", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("metrics", help="volume and ensemble metrics")
    msub = s.add_subparsers(dest="mode", parser_class=_Parser)
    m = msub.add_parser("fsc")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m = msub.add_parser("pcv")
    m.add_argument("--reference", nargs="+", required=True)
    m.add_argument("--test", nargs="+", required=True)
    m.add_argument("--rank", type=int)
    for mode in ("sample-fsc", "cluster-fsc"):
        m = msub.add_parser(mode)
        m.add_argument("--checkpoint", required=True)
        m.add_argument("--particles", required=True)
        m.add_argument("--metadata", required=True)
        m.add_argument("--gt", nargs="+", required=True)
        m.add_argument("--k", type=int, default=10)
        m.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("map-atoms", help="displace a PDB model by a decoded deformation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pdb", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--z", help="comma-separated latent code")
    s.add_argument("--particle", type=int, help="use the latent of this particle")
    s.add_argument("--particles")
    s.add_argument("--metadata")
    s.set_defaults(func=cmd_map_atoms)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.command == "metrics" and args.mode is None:
            raise UsageError("metrics needs a mode: fsc, pcv, sample-fsc or cluster-fsc")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
