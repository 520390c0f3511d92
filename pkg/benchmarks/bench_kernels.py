"""Time the TSDF integration and marching-cubes kernels on both backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--voxel-size 0.02]

Workloads: integrating the frames of the three-object synthetic scene, and
meshing an analytic sphere at 1 cm voxels. Both backends must produce the
same mesh; the script checks that before printing timings.
"""
import argparse
import statistics
import time

import numpy as np

from semrecon import kernels, synth
from semrecon.fusion import TsdfVolume


def _time(fn, repeat):
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        runs.append(time.perf_counter() - t0)
    return statistics.median(runs), out


def integrate_workload(rendering, voxel_size):
    def go():
        vol = TsdfVolume(voxel_size)
        for fr in rendering.frames:
            vol.integrate(fr.depth, fr.pose, rendering.intrinsics)
        return vol
    return go


def sphere_volume(voxel_size=0.01, radius=0.5):
    vol = TsdfVolume(voxel_size)
    lim = radius + 0.1
    vol.write_sdf(lambda p: np.linalg.norm(p, axis=1) - radius, [-lim] * 3, [lim] * 3)
    return vol


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--voxel-size", type=float, default=0.02)
    ap.add_argument("--frames", type=int, default=8)
    args = ap.parse_args()

    rendering = synth.render(synth.three_object_scene(frame_count=args.frames))
    sphere = sphere_volume()
    backends = kernels.available_backends()
    results, meshes = {}, {}
    for name in backends:
        with kernels.use_backend(name):
            t_int, vol = _time(integrate_workload(rendering, args.voxel_size), args.repeat)
            t_mc, mesh = _time(sphere.extract_mesh, args.repeat)
        results[name] = (t_int, t_mc)
        meshes[name] = (vol, mesh)

    if "cython" in meshes:
        (va, ma), (vb, mb) = meshes["python"], meshes["cython"]
        same = (np.array_equal(va.voxels()[1], vb.voxels()[1])
                and np.array_equal(ma.vertices, mb.vertices) and np.array_equal(ma.faces, mb.faces))
        print(f"backends agree bit-for-bit: {same}")

    print(f"integration: {args.frames} frames of 640x480 at {args.voxel_size} m voxels")
    print(f"marching cubes: sphere r=0.5 m at 0.01 m voxels ({len(meshes['python'][1].faces)} faces)")
    print(f"{'backend':<10}{'integrate (s)':>16}{'mesh (s)':>12}")
    for name, (a, b) in results.items():
        print(f"{name:<10}{a:>16.4f}{b:>12.4f}")
    if "cython" in results:
        a0, b0 = results["python"]
        a1, b1 = results["cython"]
        print(f"{'speedup':<10}{a0 / a1:>15.1f}x{b0 / b1:>11.1f}x")


if __name__ == "__main__":
    main()
