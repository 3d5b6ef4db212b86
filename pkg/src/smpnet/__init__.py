"""Spherical-coordinate featurization and message passing for 3D graphs."""

__version__ = "0.1.0"

from .basis import BasisTables, bessel_roots, build_tables, rbf_embed, real_sph_harm, sbf_embed, spherical_bessel, tbf_embed
from .geometry import (DirectedEdgeList, TwoHopGeometry, build_radius_graph,
                       build_two_hop_index, compute_angles, compute_torsions,
                       rigid_transform, two_hop_geometry)
from .ingest import Graph3D, RunConfig, load_config, load_manifest, load_xyz, parse_config, parse_xyz
from .network import (ModelParams, backward, export_filters, featurize_graph,
                      forward, init_params, load_model, save_model)
# The training entry point stays at smpnet.train.train so the function does
# not shadow its submodule; the rest of that module's API is re-exported.
from .train import (MetricReport, OptimState, TrainResult, adam_step, evaluate,
                    fd_forces, lr_at, run_ablation, synthetic_torsion_task)

__all__ = [
    "BasisTables", "DirectedEdgeList", "Graph3D", "MetricReport", "ModelParams",
    "OptimState", "RunConfig", "TrainResult", "TwoHopGeometry", "adam_step",
    "backward", "bessel_roots", "build_radius_graph", "build_tables",
    "build_two_hop_index", "compute_angles", "compute_torsions", "evaluate",
    "export_filters", "fd_forces", "featurize_graph", "forward", "init_params",
    "load_config", "load_manifest", "load_model", "load_xyz", "lr_at",
    "parse_config", "parse_xyz", "rbf_embed", "real_sph_harm", "rigid_transform",
    "run_ablation", "save_model", "sbf_embed", "spherical_bessel",
    "synthetic_torsion_task", "tbf_embed", "two_hop_geometry",
]
