//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Volumes are written as little-endian `FLOAT32`, label maps as `UINT8`.
//! Subject, contrast and provenance travel in the 80-byte `descrip` field as
//! `synthseg;subject=<id>;contrast=<MRI1|MRI2|MRI3>;provenance=<real|from:MRIk>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use ndarray::Array3;

use super::{Contrast, ContrastVolume, Provenance, TissueLabelMap};
use crate::error::IoContext;
use crate::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DESCRIP_OFFSET: usize = 148;
const DESCRIP_LEN: usize = 80;
const MAGIC_OFFSET: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Decoded header fields plus raw voxel samples.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    /// `(nx, ny, nz)`.
    pub dim: [usize; 3],
    /// Voxel size in mm along x, y, z.
    pub spacing: [f64; 3],
    pub descrip: String,
    pub datatype: i16,
    /// Samples in file order (x fastest), after `scl_slope`/`scl_inter`.
    pub samples: Vec<f64>,
}

impl NiftiImage {
    /// Voxel grid as `(z, y, x)`.
    pub fn zyx(&self) -> (usize, usize, usize) {
        (self.dim[2], self.dim[1], self.dim[0])
    }
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn encode_header(dim_zyx: (usize, usize, usize), spacing: [f64; 3], datatype: i16, bitpix: i16, descrip: &str) -> Result<Vec<u8>> {
    if descrip.len() >= DESCRIP_LEN {
        return Err(Error::Data(format!("descrip {descrip:?} exceeds {} bytes", DESCRIP_LEN - 1)));
    }
    let (nz, ny, nx) = dim_zyx;
    let mut h = vec![0u8; VOX_OFFSET];
    type E = LittleEndian;
    E::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let ndim: i16 = if nz > 1 { 3 } else { 2 };
    let dims = [ndim, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        E::write_i16(&mut h[40 + 2 * i..42 + 2 * i], *d);
    }
    E::write_i16(&mut h[70..72], datatype);
    E::write_i16(&mut h[72..74], bitpix);
    let pixdim = [1.0f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        E::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *p);
    }
    E::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    E::write_f32(&mut h[112..116], 1.0);
    h[123] = 2; // xyzt_units: mm
    h[DESCRIP_OFFSET..DESCRIP_OFFSET + descrip.len()].copy_from_slice(descrip.as_bytes());
    // sform: scaled identity
    E::write_i16(&mut h[254..256], 1);
    E::write_f32(&mut h[280..284], spacing[0] as f32);
    E::write_f32(&mut h[300..304], spacing[1] as f32);
    E::write_f32(&mut h[320..324], spacing[2] as f32);
    h[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("nii.partial");
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

/// Parses a `.nii` file. Truncated or malformed input yields
/// [`Error::Format`] with the offending byte offset; nothing partial is returned.
pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let bytes = fs::read(path).at(path)?;
    decode_nifti(path, &bytes)
}

fn decode_nifti(path: &Path, bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(format_err(path, bytes.len(), format!("header truncated ({} of {HEADER_SIZE} bytes)", bytes.len())));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode_with::<LittleEndian>(path, bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode_with::<BigEndian>(path, bytes)
    } else {
        Err(format_err(path, 0, format!("sizeof_hdr is {}, expected 348", LittleEndian::read_i32(&bytes[0..4]))))
    }
}

fn decode_with<E: ByteOrder>(path: &Path, b: &[u8]) -> Result<NiftiImage> {
    if &b[MAGIC_OFFSET..MAGIC_OFFSET + 4] != b"n+1\0" {
        return Err(format_err(path, MAGIC_OFFSET, "magic is not single-file NIfTI-1 \"n+1\""));
    }
    let ndim = E::read_i16(&b[40..42]);
    if !(1..=7).contains(&ndim) {
        return Err(format_err(path, 40, format!("dim[0] = {ndim} outside 1..=7")));
    }
    let mut dim = [1usize; 3];
    for i in 0..(ndim as usize) {
        let d = E::read_i16(&b[42 + 2 * i..44 + 2 * i]);
        if d < 1 {
            return Err(format_err(path, 42 + 2 * i, format!("dim[{}] = {d}", i + 1)));
        }
        if i < 3 {
            dim[i] = d as usize;
        } else if d != 1 {
            return Err(format_err(path, 42 + 2 * i, "only 2D/3D images are supported"));
        }
    }
    let datatype = E::read_i16(&b[70..72]);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format_err(path, 70, format!("unsupported datatype {other}"))),
    };
    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = E::read_f32(&b[80 + 4 * i..84 + 4 * i]) as f64;
    }
    let vox_offset = E::read_f32(&b[108..112]);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(format_err(path, 108, format!("vox_offset {vox_offset} invalid")));
    }
    let vox_offset = vox_offset as usize;
    let slope = E::read_f32(&b[112..116]) as f64;
    let inter = E::read_f32(&b[116..120]) as f64;
    let raw_descrip = &b[DESCRIP_OFFSET..DESCRIP_OFFSET + DESCRIP_LEN];
    let end = raw_descrip.iter().position(|&c| c == 0).unwrap_or(DESCRIP_LEN);
    let descrip = String::from_utf8_lossy(&raw_descrip[..end]).into_owned();

    let count = dim.iter().product::<usize>();
    let need = vox_offset + count * width;
    if b.len() < need {
        return Err(format_err(
            path,
            b.len(),
            format!("voxel data truncated: need {} bytes from offset {vox_offset}, file ends at {}", count * width, b.len()),
        ));
    }
    let data = &b[vox_offset..need];
    let mut samples: Vec<f64> = match datatype {
        DT_UINT8 => data.iter().map(|&v| v as f64).collect(),
        DT_INT16 => data.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        DT_INT32 => data.chunks_exact(4).map(|c| E::read_i32(c) as f64).collect(),
        DT_FLOAT32 => data.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
        _ => data.chunks_exact(8).map(|c| E::read_f64(c)).collect(),
    };
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        samples.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(NiftiImage {
        dim,
        spacing,
        descrip,
        datatype,
        samples,
    })
}

fn parse_descrip(descrip: &str) -> Vec<(&str, &str)> {
    descrip
        .strip_prefix("synthseg;")
        .map(|rest| rest.split(';').filter_map(|kv| kv.split_once('=')).collect())
        .unwrap_or_default()
}

fn descrip_field<'a>(path: &Path, fields: &[(&str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| format_err(path, DESCRIP_OFFSET, format!("descrip lacks {key}=")))
}

pub fn write_volume(vol: &ContrastVolume, path: &Path) -> Result<()> {
    let provenance = match vol.provenance() {
        Provenance::Real => "real".to_string(),
        Provenance::Synthesized { source } => format!("from:{source}"),
    };
    let descrip = format!(
        "synthseg;subject={};contrast={};provenance={provenance}",
        vol.subject_id(),
        vol.contrast()
    );
    let mut bytes = encode_header(vol.voxels().dim(), vol.spacing(), DT_FLOAT32, 32, &descrip)?;
    bytes.reserve(vol.voxels().len() * 4);
    for v in vol.voxels().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_volume(path: &Path) -> Result<ContrastVolume> {
    let img = read_nifti(path)?;
    let fields = parse_descrip(&img.descrip);
    let subject = descrip_field(path, &fields, "subject")?.to_string();
    let contrast: Contrast = descrip_field(path, &fields, "contrast")?
        .parse()
        .map_err(|_| format_err(path, DESCRIP_OFFSET, "bad contrast in descrip"))?;
    let provenance = match descrip_field(path, &fields, "provenance")? {
        "real" => Provenance::Real,
        other => match other.strip_prefix("from:").map(str::parse::<Contrast>) {
            Some(Ok(source)) => Provenance::Synthesized { source },
            _ => return Err(format_err(path, DESCRIP_OFFSET, format!("bad provenance {other:?}"))),
        },
    };
    let voxels = Array3::from_shape_vec(img.zyx(), img.samples.iter().map(|&v| v as f32).collect())
        .expect("sample count checked against dims");
    ContrastVolume::new(voxels, contrast, provenance, subject, img.spacing)
}

pub fn write_labels(labels: &TissueLabelMap, path: &Path) -> Result<()> {
    let descrip = format!("synthseg;subject={};kind=labels", labels.subject_id());
    let mut bytes = encode_header(labels.dim(), labels.spacing(), DT_UINT8, 8, &descrip)?;
    bytes.extend(labels.labels().iter().copied());
    write_atomic(path, &bytes)
}

/// Reads an integer label image. The subject id comes from `descrip` when
/// present, otherwise from the file stem.
pub fn read_labels(path: &Path) -> Result<TissueLabelMap> {
    let img = read_nifti(path)?;
    if !matches!(img.datatype, DT_UINT8 | DT_INT16 | DT_INT32) {
        return Err(format_err(path, 70, format!("label datatype {} is not integer", img.datatype)));
    }
    let fields = parse_descrip(&img.descrip);
    let subject = descrip_field(path, &fields, "subject")
        .map(str::to_string)
        .unwrap_or_else(|_| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let mut labels = Vec::with_capacity(img.samples.len());
    for (i, &v) in img.samples.iter().enumerate() {
        if v < 0.0 || v > 255.0 || v.fract() != 0.0 {
            return Err(Error::Data(format!("{}: label value {v} at voxel {i}", path.display())));
        }
        labels.push(v as u8);
    }
    let labels = Array3::from_shape_vec(img.zyx(), labels).expect("sample count checked against dims");
    TissueLabelMap::new(labels, subject, img.spacing)
}
