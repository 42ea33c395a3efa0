//! Gaussian export in the binary PLY layout used by common splat viewers:
//! logit opacity, log scales, DC color plus channel-major higher bands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::splat::{sh_coeff_count, GaussianSet};

pub fn write_ply(set: &GaussianSet, out: &mut impl Write) -> std::io::Result<()> {
    let bands = sh_coeff_count(set.sh_degree);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", set.len()));
    let mut props = vec!["x", "y", "z", "nx", "ny", "nz"].into_iter().map(String::from).collect::<Vec<_>>();
    props.extend((0..3).map(|c| format!("f_dc_{c}")));
    props.extend((0..3 * (bands - 1)).map(|k| format!("f_rest_{k}")));
    props.push("opacity".into());
    props.extend((0..3).map(|k| format!("scale_{k}")));
    props.extend((0..4).map(|k| format!("rot_{k}")));
    for p in &props {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;

    let mut row = Vec::with_capacity(props.len());
    for i in 0..set.len() {
        row.clear();
        row.extend(set.means[i].iter().copied());
        row.extend([0.0; 3]);
        let sh = set.sh_of(i);
        row.extend((0..3).map(|c| sh[c]));
        // f_rest is channel-major; ours is basis-major
        for c in 0..3 {
            for k in 1..bands {
                row.push(sh[3 * k + c]);
            }
        }
        let a = set.opacities[i];
        row.push((a / (1.0 - a)).ln());
        row.extend(set.scales[i].iter().map(|s| s.ln()));
        row.extend(set.rotations[i]);
        for v in &row {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn export_ply(set: &GaussianSet, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_ply(set, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
