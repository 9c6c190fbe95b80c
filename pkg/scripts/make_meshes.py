"""Write the lattice block meshes used by the bundled scenes."""
import argparse
from pathlib import Path

from pncg_ipc.mesh import box_mesh, write_tmesh

MESHES = {
    # name: (size, cells, origin)
    "block_5": ((0.2, 0.2, 0.2), (5, 5, 5), (-0.1, -0.1, -0.1)),
    "bar_10x8x5": ((0.25, 0.2, 0.125), (10, 8, 5), (-0.125, -0.1, -0.0625)),
    "cube_1": ((0.1, 0.1, 0.1), (1, 1, 1), (-0.05, -0.05, -0.05)),
    "rod_3x3x12": ((0.06, 0.06, 0.24), (3, 3, 12), (-0.03, -0.03, 0.0)),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=Path(__file__).resolve().parent.parent / "scenes" / "meshes", type=Path)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for name, (size, cells, origin) in MESHES.items():
        v, t = box_mesh(size, cells, origin)
        write_tmesh(args.out / f"{name}.tmesh", v, t)
        print(f"{name}: {len(v)} vertices, {len(t)} tets")


if __name__ == "__main__":
    main()
