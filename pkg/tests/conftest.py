import pytest

from mscsanet.data import PhantomSpec, generate_phantom, write_manifest
from mscsanet.nifti import nifti_write


def make_dataset(out_dir, count=4, extents=(16, 16, 16), seed=100):
    """Phantom cases plus a manifest; returns the manifest path."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        vol, mask = generate_phantom(
            PhantomSpec(extents=extents, radius=(2.0, 4.0), seed=seed + i)
        )
        vp = out_dir / f"c{i}.nii"
        mp = out_dir / f"c{i}_mask.nii"
        nifti_write(vol, vp)
        nifti_write(mask, mp)
        rows.append(
            {
                "id": f"c{i}",
                "volume_path": str(vp),
                "mask_path": str(mp),
                "lesion_volume": mask.lesion_volume,
            }
        )
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


@pytest.fixture
def tiny_dataset(tmp_path):
    return make_dataset(tmp_path / "data")
