//! Camera-side tip-angle measurement from binarized images.
//!
//! The robot appears in a binarized frame as a thin bright band. The pipeline
//! classifies the band by a linearity score, fits either a least-squares
//! parabola (gentle bends) or a direct least-squares ellipse (strong bends),
//! traces the fitted curve from the blob centroid to both ends of the band,
//! and reports the tip slope angle at the end that bends the most.
//!
//! Image coordinates are `(u, v)` = (column, row) with the row axis pointing
//! down; world angles negate the image-frame slope to undo that flip.

use nalgebra::{Matrix2, Matrix3, SMatrix, SVector, Vector3};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

/// Errors raised by the vision pipeline.
#[derive(Debug, Error)]
pub enum VisionError {
    /// The image contains no foreground pixels.
    #[error("image contains no foreground pixels")]
    EmptyImage,
    /// An operation needs more foreground pixels than the image provides.
    #[error("operation needs at least {needed} foreground pixels, image has {got}")]
    NotEnoughPixels { needed: usize, got: usize },
    /// The least-squares system for the parabola fit is rank deficient
    /// (for example a vertical band); the ellipse branch handles such shapes.
    #[error("quadratic fit is rank deficient: {0}; try the ellipse branch")]
    RankDeficient(String),
    /// No valid ellipse could be extracted from the conic fit.
    #[error("conic fit is degenerate: {0}")]
    DegenerateConic(String),
    /// The trace start point does not touch the foreground band.
    #[error("trace start ({u:.1}, {v:.1}) is not on or adjacent to foreground")]
    StartOffForeground { u: f64, v: f64 },
    /// Tracing left the image bounds before finding the end of the band.
    #[error("trace left image bounds at ({u:.1}, {v:.1})")]
    TraceOutOfBounds { u: f64, v: f64 },
    /// The requested canvas cannot contain the rasterized shape.
    #[error("image {width}x{height} px is too small for the shape at {pitch} m/px")]
    ImageTooSmall {
        width: usize,
        height: usize,
        pitch: f64,
    },
    /// A parameter fails validation.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// Underlying I/O failure while reading or writing an image file.
    #[error("image i/o failed")]
    Io(#[from] std::io::Error),
    /// The file is not a PGM/PBM image this module understands.
    #[error("unsupported or malformed image file: {0}")]
    BadFormat(String),
}

/// Binarized raster image with row-major foreground bits.
///
/// `pitch` records the physical pixel size in metres per pixel when the image
/// came from the rasterizer; images loaded from disk carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    /// Metres per pixel, when known.
    pub pitch: Option<f64>,
}

impl BinaryImage {
    /// Creates an all-background image.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
            pitch: None,
        }
    }

    /// Image width in pixels.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Image height in pixels.
    pub fn height(&self) -> usize {
        self.height
    }

    /// Returns the pixel at column `u`, row `v`; out-of-bounds reads are background.
    pub fn get(&self, u: i64, v: i64) -> bool {
        if u < 0 || v < 0 || u as usize >= self.width || v as usize >= self.height {
            return false;
        }
        self.bits[v as usize * self.width + u as usize]
    }

    /// Sets the pixel at column `u`, row `v` to foreground. Out-of-bounds writes are ignored.
    pub fn set(&mut self, u: i64, v: i64) {
        if u < 0 || v < 0 || u as usize >= self.width || v as usize >= self.height {
            return;
        }
        self.bits[v as usize * self.width + u as usize] = true;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground pixel coordinates as `(u, v)` pairs in row-major order.
    pub fn foreground_points(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(self.count());
        for v in 0..self.height {
            for u in 0..self.width {
                if self.bits[v * self.width + u] {
                    pts.push((u as f64, v as f64));
                }
            }
        }
        pts
    }

    /// Number of foreground pixels in the 3x3 neighborhood centred on the
    /// pixel nearest `(u, v)`.
    pub fn neighborhood_sum(&self, u: f64, v: f64) -> u32 {
        let cu = u.round() as i64;
        let cv = v.round() as i64;
        let mut sum = 0u32;
        for dv in -1..=1 {
            for du in -1..=1 {
                if self.get(cu + du, cv + dv) {
                    sum += 1;
                }
            }
        }
        sum
    }

    /// Whether `(u, v)` rounds to a pixel inside the image.
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        let cu = u.round() as i64;
        let cv = v.round() as i64;
        cu >= 0 && cv >= 0 && (cu as usize) < self.width && (cv as usize) < self.height
    }

    /// Writes the image as a binary PGM (P5): foreground 255, background 0.
    pub fn write_pgm(&self, path: &Path) -> Result<(), VisionError> {
        let mut data = Vec::with_capacity(self.bits.len() + 32);
        data.extend_from_slice(format!("P5\n{} {}\n255\n", self.width, self.height).as_bytes());
        data.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0u8 }));
        std::fs::write(path, data)?;
        Ok(())
    }

    /// Reads a binary PGM (P5) or PBM (P4) file.
    ///
    /// PGM grey levels at or above 128 become foreground. PBM set bits (black
    /// ink) become foreground.
    pub fn read(path: &Path) -> Result<Self, VisionError> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        Self::parse(&raw)
    }

    fn parse(raw: &[u8]) -> Result<Self, VisionError> {
        let mut pos = 0usize;
        let magic = next_token(raw, &mut pos)
            .ok_or_else(|| VisionError::BadFormat("missing magic number".into()))?;
        match magic.as_slice() {
            b"P5" => {
                let (width, height) = parse_dims(raw, &mut pos)?;
                let maxval = parse_int(raw, &mut pos, "maxval")?;
                if maxval == 0 || maxval > 255 {
                    return Err(VisionError::BadFormat(format!(
                        "unsupported PGM maxval {maxval}"
                    )));
                }
                pos += 1;
                let need = width * height;
                if raw.len() < pos + need {
                    return Err(VisionError::BadFormat("truncated PGM pixel data".into()));
                }
                let threshold = (maxval + 1) / 2;
                let bits = raw[pos..pos + need]
                    .iter()
                    .map(|&g| usize::from(g) >= threshold)
                    .collect();
                Ok(Self {
                    width,
                    height,
                    bits,
                    pitch: None,
                })
            }
            b"P4" => {
                let (width, height) = parse_dims(raw, &mut pos)?;
                pos += 1;
                let row_bytes = width.div_ceil(8);
                if raw.len() < pos + row_bytes * height {
                    return Err(VisionError::BadFormat("truncated PBM pixel data".into()));
                }
                let mut bits = vec![false; width * height];
                for v in 0..height {
                    let row = &raw[pos + v * row_bytes..pos + (v + 1) * row_bytes];
                    for u in 0..width {
                        bits[v * width + u] = row[u / 8] & (0x80 >> (u % 8)) != 0;
                    }
                }
                Ok(Self {
                    width,
                    height,
                    bits,
                    pitch: None,
                })
            }
            other => Err(VisionError::BadFormat(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(other)
            ))),
        }
    }
}

fn next_token(raw: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    while *pos < raw.len() {
        let b = raw[*pos];
        if b == b'#' {
            while *pos < raw.len() && raw[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| raw[start..*pos].to_vec())
}

fn parse_int(raw: &[u8], pos: &mut usize, what: &str) -> Result<usize, VisionError> {
    let tok =
        next_token(raw, pos).ok_or_else(|| VisionError::BadFormat(format!("missing {what}")))?;
    String::from_utf8_lossy(&tok)
        .parse()
        .map_err(|_| VisionError::BadFormat(format!("bad {what}")))
}

fn parse_dims(raw: &[u8], pos: &mut usize) -> Result<(usize, usize), VisionError> {
    let width = parse_int(raw, pos, "width")?;
    let height = parse_int(raw, pos, "height")?;
    if width == 0 || height == 0 || width * height > 1 << 28 {
        return Err(VisionError::BadFormat(format!(
            "unreasonable dimensions {width}x{height}"
        )));
    }
    Ok((width, height))
}

/// Renders a solved shape onto a canvas of `width` x `height` pixels.
///
/// The plane-intrinsic curve (arc-length integrals of cos/sin of the bending
/// angle) maps to pixels as `u = base_u + x / pitch`, `v = base_v - y / pitch`,
/// so the image row axis points down. The base sits at a fixed margin from the
/// left edge, vertically centred. Each sample is stamped with a `stroke` x
/// `stroke` square; samples are spaced at half-pixel arc increments, which
/// keeps the band 8-connected for any `stroke >= 1`.
pub fn rasterize(
    shape: &crate::elastica::Shape,
    pitch: f64,
    stroke: usize,
    width: usize,
    height: usize,
) -> Result<BinaryImage, VisionError> {
    if !(pitch > 0.0) || !pitch.is_finite() {
        return Err(VisionError::InvalidParameter(format!(
            "pitch must be positive and finite, got {pitch}"
        )));
    }
    if stroke == 0 {
        return Err(VisionError::InvalidParameter(
            "stroke must be at least 1 pixel".into(),
        ));
    }
    let margin = stroke as f64 + 2.0;
    let base_u = margin;
    let base_v = height as f64 / 2.0;

    let mut img = BinaryImage::new(width, height);
    img.pitch = Some(pitch);
    let lo = -((stroke as i64) / 2);
    let hi = (stroke as i64 - 1) / 2;

    let length = shape.length();
    let step = (pitch / 2.0).min(length);
    let n = (length / step).ceil() as usize;
    for i in 0..=n {
        let s = (length * i as f64 / n as f64).min(length);
        let (cx, sy) = shape
            .planar_integrals(s)
            .expect("sample arc length stays within the body");
        let u = base_u + cx / pitch;
        let v = base_v - sy / pitch;
        let cu = u.round() as i64;
        let cv = v.round() as i64;
        if cu + lo < 0
            || cv + lo < 0
            || cu + hi >= width as i64
            || cv + hi >= height as i64
        {
            return Err(VisionError::ImageTooSmall {
                width,
                height,
                pitch,
            });
        }
        for dv in lo..=hi {
            for du in lo..=hi {
                img.set(cu + du, cv + dv);
            }
        }
    }
    Ok(img)
}

/// Mean `(u, v)` of the foreground pixels.
pub fn centroid(img: &BinaryImage) -> Result<(f64, f64), VisionError> {
    let pts = img.foreground_points();
    if pts.is_empty() {
        return Err(VisionError::EmptyImage);
    }
    let n = pts.len() as f64;
    let (su, sv) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), &(u, v)| (a + u, b + v));
    Ok((su / n, sv / n))
}

/// Ratio of the minor to major eigenvalue of the foreground pixel covariance.
///
/// Near 0 for a nearly straight band, near 1 for an isotropic blob. Gentle
/// bends score low; strong bends spread mass across both principal directions
/// and score higher.
pub fn linearity(img: &BinaryImage) -> Result<f64, VisionError> {
    let pts = img.foreground_points();
    linearity_of_points(&pts)
}

fn linearity_of_points(pts: &[(f64, f64)]) -> Result<f64, VisionError> {
    if pts.len() < 2 {
        return Err(VisionError::NotEnoughPixels {
            needed: 2,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let (mu, mv) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), &(u, v)| (a + u / n, b + v / n));
    let (mut suu, mut suv, mut svv) = (0.0, 0.0, 0.0);
    for &(u, v) in pts {
        let du = u - mu;
        let dv = v - mv;
        suu += du * du;
        suv += du * dv;
        svv += dv * dv;
    }
    let cov = Matrix2::new(suu, suv, suv, svv) / n;
    let eig = cov.symmetric_eigenvalues();
    let hi = eig[0].max(eig[1]);
    let lo = eig[0].min(eig[1]).max(0.0);
    if hi <= f64::EPSILON {
        return Err(VisionError::DegenerateConic(
            "foreground pixels have zero spatial variance".into(),
        ));
    }
    Ok(lo / hi)
}

/// Least-squares parabola `v = a u^2 + b u + c` through the foreground pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Root-mean-square vertical residual of the fit, in pixels.
    pub residual_rms: f64,
}

impl QuadraticFit {
    /// Curve height at column `u`.
    pub fn value(&self, u: f64) -> f64 {
        self.a * u * u + self.b * u + self.c
    }

    /// Curve slope `dv/du` at column `u`.
    pub fn slope(&self, u: f64) -> f64 {
        2.0 * self.a * u + self.b
    }
}

/// Fits a parabola to the foreground pixels of `img`.
pub fn fit_quadratic(img: &BinaryImage) -> Result<QuadraticFit, VisionError> {
    fit_quadratic_points(&img.foreground_points())
}

/// Fits `v = a u^2 + b u + c` to `(u, v)` points by least squares.
///
/// The columns are centred before forming the normal equations so the fit is
/// exactly translation-equivariant. A rank-deficient system (for example all
/// points in one column) is rejected; such bands belong to the ellipse branch.
pub fn fit_quadratic_points(pts: &[(f64, f64)]) -> Result<QuadraticFit, VisionError> {
    if pts.len() < 3 {
        return Err(VisionError::NotEnoughPixels {
            needed: 3,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let mu = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let sx = (pts.iter().map(|p| (p.0 - mu).powi(2)).sum::<f64>() / n).sqrt();
    if sx < 1e-9 {
        return Err(VisionError::RankDeficient(
            "all points share one column".into(),
        ));
    }

    // Centre and scale the column coordinate so the basis (x^2, x, 1) is
    // well conditioned regardless of band width.
    let mut ata = SMatrix::<f64, 3, 3>::zeros();
    let mut atb = SVector::<f64, 3>::zeros();
    for &(u, v) in pts {
        let x = (u - mu) / sx;
        let row = Vector3::new(x * x, x, 1.0);
        ata += row * row.transpose();
        atb += row * v;
    }
    let svals = ata.singular_values();
    if svals[2] < 1e-9 * svals[0] {
        return Err(VisionError::RankDeficient(
            "column values do not span a parabola basis".into(),
        ));
    }
    let coeffs = ata
        .lu()
        .solve(&atb)
        .filter(|c| c.iter().all(|x| x.is_finite()))
        .ok_or_else(|| {
            VisionError::RankDeficient("column values do not span a parabola basis".into())
        })?;

    // Undo the scaling and centering:
    // v = a0 ((u - mu)/sx)^2 + a1 (u - mu)/sx + a2.
    let ac = coeffs[0] / (sx * sx);
    let bc = coeffs[1] / sx;
    let a = ac;
    let b = bc - 2.0 * ac * mu;
    let c = ac * mu * mu - bc * mu + coeffs[2];

    let ss: f64 = pts
        .iter()
        .map(|&(u, v)| {
            let r = v - (a * u * u + b * u + c);
            r * r
        })
        .sum();
    Ok(QuadraticFit {
        a,
        b,
        c,
        residual_rms: (ss / n).sqrt(),
    })
}

/// Ellipse extracted from a direct least-squares conic fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    /// Conic coefficients `[A, B, C, D, E, F]` of
    /// `A u^2 + B u v + C v^2 + D u + E v + F = 0`, with `4AC - B^2 > 0`.
    pub conic: [f64; 6],
    /// Ellipse centre `(u, v)`.
    pub center: (f64, f64),
    /// Semi-major axis length in pixels.
    pub semi_major: f64,
    /// Semi-minor axis length in pixels.
    pub semi_minor: f64,
    /// Rotation of the major axis from the +u axis, in `(-pi/2, pi/2]`.
    pub orientation: f64,
    /// Root-mean-square algebraic residual of the normalized conic.
    pub residual_rms: f64,
}

impl EllipseFit {
    /// Point on the ellipse at eccentric angle `alpha`.
    pub fn point(&self, alpha: f64) -> (f64, f64) {
        let (s, c) = self.orientation.sin_cos();
        let px = self.semi_major * alpha.cos();
        let py = self.semi_minor * alpha.sin();
        (
            self.center.0 + c * px - s * py,
            self.center.1 + s * px + c * py,
        )
    }

    /// Unit tangent at eccentric angle `alpha`, in the direction of
    /// increasing `alpha`.
    pub fn tangent(&self, alpha: f64) -> (f64, f64) {
        let (s, c) = self.orientation.sin_cos();
        let tx = -self.semi_major * alpha.sin();
        let ty = self.semi_minor * alpha.cos();
        let (gu, gv) = (c * tx - s * ty, s * tx + c * ty);
        let norm = gu.hypot(gv);
        (gu / norm, gv / norm)
    }

    /// Eccentric angle whose ellipse point lies in the direction of `(u, v)`
    /// from the centre.
    pub fn eccentric_angle(&self, u: f64, v: f64) -> f64 {
        let (s, c) = self.orientation.sin_cos();
        let du = u - self.center.0;
        let dv = v - self.center.1;
        let px = c * du + s * dv;
        let py = -s * du + c * dv;
        (py / self.semi_minor).atan2(px / self.semi_major)
    }
}

/// Fits an ellipse to the foreground pixels of `img`.
pub fn fit_ellipse(img: &BinaryImage) -> Result<EllipseFit, VisionError> {
    fit_ellipse_points(&img.foreground_points())
}

/// Direct least-squares ellipse fit to `(u, v)` points.
///
/// Minimizes the algebraic conic residual subject to the ellipse constraint
/// `4AC - B^2 = 1`, which reduces to a 3x3 generalized eigenproblem on the
/// quadratic conic coefficients. Points are shifted to their centroid and
/// scaled to a root-mean-square radius of sqrt(2) before fitting, and the
/// conic is mapped back afterwards.
pub fn fit_ellipse_points(pts: &[(f64, f64)]) -> Result<EllipseFit, VisionError> {
    if pts.len() < 6 {
        return Err(VisionError::NotEnoughPixels {
            needed: 6,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let (mu, mv) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), &(u, v)| (a + u / n, b + v / n));
    let rms = (pts
        .iter()
        .map(|&(u, v)| (u - mu).powi(2) + (v - mv).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if rms <= f64::EPSILON {
        return Err(VisionError::DegenerateConic(
            "points are coincident".into(),
        ));
    }
    let scale = std::f64::consts::SQRT_2 / rms;

    // Scatter blocks of the design matrix [x^2, xy, y^2 | x, y, 1].
    let mut s11 = Matrix3::<f64>::zeros();
    let mut s12 = Matrix3::<f64>::zeros();
    let mut s22 = Matrix3::<f64>::zeros();
    for &(u, v) in pts {
        let x = (u - mu) * scale;
        let y = (v - mv) * scale;
        let q = Vector3::new(x * x, x * y, y * y);
        let l = Vector3::new(x, y, 1.0);
        s11 += q * q.transpose();
        s12 += q * l.transpose();
        s22 += l * l.transpose();
    }
    let sv = s22.singular_values();
    if sv[2] < 1e-10 * sv[0].max(1.0) {
        return Err(VisionError::DegenerateConic(
            "points are collinear or coincident".into(),
        ));
    }
    let s22_inv = s22.try_inverse().ok_or_else(|| {
        VisionError::DegenerateConic("linear scatter block is singular".into())
    })?;
    let m = s11 - s12 * s22_inv * s12.transpose();

    // Constraint matrix of 4AC - B^2 = 1 on (A, B, C); its inverse is cheap.
    let c1_inv = Matrix3::new(0.0, 0.0, 0.5, 0.0, -1.0, 0.0, 0.5, 0.0, 0.0);
    let reduced = c1_inv * m;

    let mut best: Option<([f64; 6], f64)> = None;
    for lambda in real_eigenvalues_3x3(&reduced) {
        let Some(a1) = null_vector_3x3(&(reduced - Matrix3::identity() * lambda)) else {
            continue;
        };
        // Ellipse solutions satisfy a1' C1 a1 = 4AC - B^2 > 0.
        let disc = 4.0 * a1[0] * a1[2] - a1[1] * a1[1];
        if disc <= 0.0 {
            continue;
        }
        let a1 = a1 / disc.sqrt();
        let a2 = -s22_inv * s12.transpose() * a1;
        let conic_n = [a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]];
        let res = conic_residual(&conic_n, pts, mu, mv, scale);
        if best.map_or(true, |(_, r)| res < r) {
            best = Some((conic_n, res));
        }
    }
    let (conic_n, residual_rms) = best.ok_or_else(|| {
        VisionError::DegenerateConic("no ellipse solution among the eigenpairs".into())
    })?;

    // Map A'x'^2 + B'x'y' + C'y'^2 + D'x' + E'y' + F' = 0 with
    // x' = (u - mu) s, y' = (v - mv) s back to image coordinates.
    let [ap, bp, cp, dp, ep, fp] = conic_n;
    let s = scale;
    let conic = [
        ap * s * s,
        bp * s * s,
        cp * s * s,
        -2.0 * ap * s * s * mu - bp * s * s * mv + dp * s,
        -bp * s * s * mu - 2.0 * cp * s * s * mv + ep * s,
        ap * s * s * mu * mu + bp * s * s * mu * mv + cp * s * s * mv * mv
            - dp * s * mu
            - ep * s * mv
            + fp,
    ];
    ellipse_geometry(conic, residual_rms)
}

fn conic_residual(c: &[f64; 6], pts: &[(f64, f64)], mu: f64, mv: f64, scale: f64) -> f64 {
    let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ss: f64 = pts
        .iter()
        .map(|&(u, v)| {
            let x = (u - mu) * scale;
            let y = (v - mv) * scale;
            let r = c[0] * x * x + c[1] * x * y + c[2] * y * y + c[3] * x + c[4] * y + c[5];
            (r / norm).powi(2)
        })
        .sum();
    (ss / pts.len() as f64).sqrt()
}

/// Real eigenvalues of a general 3x3 matrix via its characteristic cubic.
fn real_eigenvalues_3x3(m: &Matrix3<f64>) -> Vec<f64> {
    let tr = m.trace();
    let m2 = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
        + m[(0, 0)] * m[(2, 2)]
        - m[(0, 2)] * m[(2, 0)]
        + m[(1, 1)] * m[(2, 2)]
        - m[(1, 2)] * m[(2, 1)];
    let det = m.determinant();
    // lambda^3 + a2 lambda^2 + a1 lambda + a0 = 0
    let (a2, a1, a0) = (-tr, m2, -det);
    let p = a1 - a2 * a2 / 3.0;
    let q = 2.0 * a2.powi(3) / 27.0 - a2 * a1 / 3.0 + a0;
    let shift = -a2 / 3.0;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    if disc > 1e-300 {
        // One real root.
        let sq = disc.sqrt();
        let t = cbrt(-q / 2.0 + sq) + cbrt(-q / 2.0 - sq);
        vec![t + shift]
    } else if p.abs() < 1e-300 {
        vec![shift; 3]
    } else {
        // Three real roots via the trigonometric form.
        let r = (-p / 3.0).sqrt();
        let arg = (3.0 * q / (2.0 * p * r)).clamp(-1.0, 1.0);
        let phi = arg.acos() / 3.0;
        (0..3)
            .map(|k| {
                2.0 * r * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift
            })
            .collect()
    }
}

fn cbrt(x: f64) -> f64 {
    x.signum() * x.abs().cbrt()
}

/// Unit null vector of a (nearly) singular 3x3 matrix, from the largest
/// cross product of row pairs.
fn null_vector_3x3(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let r0 = m.row(0).transpose();
    let r1 = m.row(1).transpose();
    let r2 = m.row(2).transpose();
    let candidates = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = candidates
        .iter()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))?;
    let norm = best.norm();
    if norm < 1e-12 {
        return None;
    }
    Some(best / norm)
}

fn ellipse_geometry(conic: [f64; 6], residual_rms: f64) -> Result<EllipseFit, VisionError> {
    let [a, b, c, d, e, f] = conic;
    let denom = 4.0 * a * c - b * b;
    if denom <= 0.0 {
        return Err(VisionError::DegenerateConic(
            "conic is not an ellipse".into(),
        ));
    }
    let cx = (b * e - 2.0 * c * d) / denom;
    let cy = (b * d - 2.0 * a * e) / denom;
    // Conic value at the centre; must be negative for a real ellipse.
    let fc = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f;
    if fc >= 0.0 {
        return Err(VisionError::DegenerateConic(
            "conic has no real points".into(),
        ));
    }
    let quad = Matrix2::new(a, b / 2.0, b / 2.0, c);
    let eig = quad.symmetric_eigenvalues();
    let (l1, l2) = (eig[0].min(eig[1]), eig[0].max(eig[1]));
    if l1 <= 0.0 {
        return Err(VisionError::DegenerateConic(
            "quadratic form is not positive definite".into(),
        ));
    }
    // Semi-axis along the eigenvector of the smaller eigenvalue is the major one.
    let semi_major = (-fc / l1).sqrt();
    let semi_minor = (-fc / l2).sqrt();
    let mut orientation = if b.abs() < 1e-300 && (a - c).abs() < 1e-300 {
        0.0
    } else {
        0.5 * (b).atan2(a - c) + std::f64::consts::FRAC_PI_2
    };
    // The formula above yields the minor-axis direction of the quadratic
    // form's larger eigenvalue; shift into (-pi/2, pi/2].
    while orientation > std::f64::consts::FRAC_PI_2 {
        orientation -= std::f64::consts::PI;
    }
    while orientation <= -std::f64::consts::FRAC_PI_2 {
        orientation += std::f64::consts::PI;
    }
    Ok(EllipseFit {
        conic,
        center: (cx, cy),
        semi_major,
        semi_minor,
        orientation,
        residual_rms,
    })
}

/// Which fitted model the pipeline used for a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Gentle bend: least-squares parabola.
    Quadratic,
    /// Strong bend: direct least-squares ellipse.
    Ellipse,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Branch::Quadratic => write!(f, "quadratic"),
            Branch::Ellipse => write!(f, "ellipse"),
        }
    }
}

/// Fitted curve model for a frame.
#[derive(Debug, Clone, PartialEq)]
pub enum ConicFit {
    Quadratic(QuadraticFit),
    Ellipse(EllipseFit),
}

impl ConicFit {
    pub fn branch(&self) -> Branch {
        match self {
            ConicFit::Quadratic(_) => Branch::Quadratic,
            ConicFit::Ellipse(_) => Branch::Ellipse,
        }
    }
}

/// Outcome of tracing the fitted curve to the tip.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceResult {
    /// Tip pixel `(u, v)`.
    pub tip: (f64, f64),
    /// Eccentric angle at the tip for the ellipse branch.
    pub alpha: Option<f64>,
    /// Tip angle in the robot frame, radians. Positive bends toward the
    /// world +y axis (up in the image).
    pub theta_l: f64,
    /// Model used for the frame.
    pub branch: Branch,
}

/// Tuning knobs for [`tip_angle_from_image`].
#[derive(Debug, Clone, Copy)]
pub struct VisionOptions {
    /// Linearity score at or above which the ellipse branch is used.
    pub linearity_threshold: f64,
    /// Eccentric-angle step for the ellipse trace, radians.
    pub alpha_step: f64,
    /// How far past the band end the 3x3 stop test fires, in pixels; the
    /// ellipse tangent is evaluated that margin back along the conic.
    pub tip_margin_px: f64,
}

impl Default for VisionOptions {
    fn default() -> Self {
        Self {
            linearity_threshold: 0.02,
            alpha_step: 0.1,
            tip_margin_px: 2.0,
        }
    }
}

/// Traces the fitted curve from `start` toward both ends of the band and
/// keeps the candidate with the larger absolute slope angle.
///
/// Walking steps one pixel column (quadratic) or `alpha_step` radians
/// (ellipse) at a time and stops when the 3x3 neighborhood around the curve
/// point holds no foreground; the on/off boundary is then bisected so the
/// slope is evaluated at the band end rather than up to a whole step short.
///
/// Candidates are ranked by the magnitude of their principal slope angle
/// (tangent-line inclination, in `(-pi/2, pi/2]`): the clamped base scores
/// near zero even though its outward travel heading is near ±pi, so the
/// free end always wins. The reported angle is the full travel heading at
/// the winning end, which for the free end is the robot tip angle.
pub fn trace_to_tip(
    img: &BinaryImage,
    fit: &ConicFit,
    start: (f64, f64),
    options: &VisionOptions,
) -> Result<TraceResult, VisionError> {
    let alpha_step = options.alpha_step;
    if !(alpha_step > 0.0) || !alpha_step.is_finite() {
        return Err(VisionError::InvalidParameter(format!(
            "alpha_step must be positive and finite, got {alpha_step}"
        )));
    }
    let max_steps = 2 * (img.width() + img.height());
    match fit {
        ConicFit::Quadratic(q) => {
            let u0 = start.0.round();
            if img.neighborhood_sum(u0, q.value(u0)) == 0 {
                return Err(VisionError::StartOffForeground {
                    u: u0,
                    v: q.value(u0),
                });
            }
            let mut best: Option<(f64, TraceResult)> = None;
            for dir in [1.0f64, -1.0] {
                let mut u = u0;
                for _ in 0..max_steps {
                    let next = u + dir;
                    if !img.in_bounds(next, q.value(next)) {
                        return Err(VisionError::TraceOutOfBounds {
                            u: next,
                            v: q.value(next),
                        });
                    }
                    if img.neighborhood_sum(next, q.value(next)) == 0 {
                        break;
                    }
                    u = next;
                }
                // Image rows grow downward, so the robot-frame slope negates
                // the image-frame one. A parabola tangent never exceeds
                // |pi/2|, so the principal slope is the angle itself.
                let theta = -q.slope(u).atan();
                let cand = TraceResult {
                    tip: (u, q.value(u)),
                    alpha: None,
                    theta_l: theta,
                    branch: Branch::Quadratic,
                };
                if best.as_ref().map_or(true, |(key, _)| theta.abs() > *key) {
                    best = Some((theta.abs(), cand));
                }
            }
            Ok(best.expect("two directions always yield a candidate").1)
        }
        ConicFit::Ellipse(e) => {
            let alpha0 = e.eccentric_angle(start.0, start.1);
            let (su, sv) = e.point(alpha0);
            if img.neighborhood_sum(su, sv) == 0 {
                return Err(VisionError::StartOffForeground { u: su, v: sv });
            }
            let mut best: Option<(f64, TraceResult)> = None;
            for dir in [1.0f64, -1.0] {
                let mut alpha = alpha0;
                let mut past_end = None;
                for _ in 0..max_steps {
                    let next = alpha + dir * alpha_step;
                    let (pu, pv) = e.point(next);
                    if !img.in_bounds(pu, pv) {
                        return Err(VisionError::TraceOutOfBounds { u: pu, v: pv });
                    }
                    if img.neighborhood_sum(pu, pv) == 0 {
                        past_end = Some(next);
                        break;
                    }
                    alpha = next;
                }
                // Bisect the on/off boundary so the tangent is taken at the
                // band end rather than up to a whole step short of it.
                if let Some(mut off) = past_end {
                    for _ in 0..40 {
                        let mid = 0.5 * (alpha + off);
                        let (pu, pv) = e.point(mid);
                        if img.neighborhood_sum(pu, pv) > 0 {
                            alpha = mid;
                        } else {
                            off = mid;
                        }
                    }
                    // The stop test fires once a whole 3x3 window is empty,
                    // i.e. a couple of pixels past the band end; step that
                    // margin back so the tangent reflects the band rather
                    // than the unconstrained conic beyond it.
                    let speed = ((e.semi_major * alpha.sin()).powi(2)
                        + (e.semi_minor * alpha.cos()).powi(2))
                    .sqrt();
                    if speed > 1e-9 {
                        let pulled = alpha - dir * options.tip_margin_px / speed;
                        if (pulled - alpha0) * dir > 0.0 {
                            alpha = pulled;
                        }
                    }
                }
                // Tangent pointing in the travel direction gives the curve
                // heading at this end of the band, flipped into the robot
                // frame where rows grow upward.
                let (tu, tv) = e.tangent(alpha);
                let (hu, hv) = (dir * tu, -dir * tv);
                let heading = hv.atan2(hu);
                let principal = if hu.abs() > 1e-12 {
                    (hv / hu).atan()
                } else {
                    std::f64::consts::FRAC_PI_2
                };
                let cand = TraceResult {
                    tip: e.point(alpha),
                    alpha: Some(alpha),
                    theta_l: heading,
                    branch: Branch::Ellipse,
                };
                if best
                    .as_ref()
                    .map_or(true, |(key, _)| principal.abs() > *key)
                {
                    best = Some((principal.abs(), cand));
                }
            }
            Ok(best.expect("two directions always yield a candidate").1)
        }
    }
}

/// Measures the robot tip angle from a binarized frame.
///
/// Classifies the band by linearity, fits a parabola (low score) or an
/// ellipse (high score), and traces the fit from the centroid to the tip.
/// If the chosen fit is degenerate the other branch is tried before giving
/// up.
pub fn tip_angle_from_image(
    img: &BinaryImage,
    options: &VisionOptions,
) -> Result<TraceResult, VisionError> {
    if !(options.linearity_threshold > 0.0) {
        return Err(VisionError::InvalidParameter(
            "linearity_threshold must be positive".into(),
        ));
    }
    let g = centroid(img)?;
    let score = linearity(img)?;
    if score < options.linearity_threshold {
        match fit_quadratic(img) {
            Ok(q) => trace_to_tip(img, &ConicFit::Quadratic(q), g, options),
            Err(VisionError::RankDeficient(_)) => {
                let e = fit_ellipse(img)?;
                trace_to_tip(img, &ConicFit::Ellipse(e), g, options)
            }
            Err(err) => Err(err),
        }
    } else {
        match fit_ellipse(img) {
            Ok(e) => trace_to_tip(img, &ConicFit::Ellipse(e), g, options),
            Err(VisionError::DegenerateConic(_)) | Err(VisionError::NotEnoughPixels { .. }) => {
                let q = fit_quadratic(img)?;
                trace_to_tip(img, &ConicFit::Quadratic(q), g, options)
            }
            Err(err) => Err(err),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elastica::{Actuation, BvpSolver, Plane, RobotParams, SolverSettings};
    use approx::assert_relative_eq;

    fn image_from_points(pts: &[(i64, i64)], width: usize, height: usize) -> BinaryImage {
        let mut img = BinaryImage::new(width, height);
        for &(u, v) in pts {
            img.set(u, v);
        }
        img
    }

    #[test]
    fn centroid_matches_hand_computed_means() {
        let img = image_from_points(&[(10, 20)], 64, 64);
        assert_eq!(centroid(&img).unwrap(), (10.0, 20.0));

        let block: Vec<(i64, i64)> = (0..3)
            .flat_map(|v| (0..3).map(move |u| (5 + u, 7 + v)))
            .collect();
        let img = image_from_points(&block, 64, 64);
        assert_eq!(centroid(&img).unwrap(), (6.0, 8.0));
    }

    #[test]
    fn centroid_of_empty_image_is_an_error() {
        let img = BinaryImage::new(32, 32);
        assert!(matches!(centroid(&img), Err(VisionError::EmptyImage)));
    }

    #[test]
    fn linearity_is_tiny_for_straight_band_and_large_for_blob() {
        let bar: Vec<(i64, i64)> = (0..200).map(|u| (u, 50)).collect();
        let img = image_from_points(&bar, 256, 128);
        assert!(linearity(&img).unwrap() < 1e-9);

        let mut disk = Vec::new();
        for v in -40..=40i64 {
            for u in -40..=40i64 {
                if u * u + v * v <= 1600 {
                    disk.push((u + 60, v + 60));
                }
            }
        }
        let img = image_from_points(&disk, 128, 128);
        assert!(linearity(&img).unwrap() > 0.9);
    }

    #[test]
    fn linearity_of_quarter_circle_matches_covariance_oracle() {
        // Quarter-circle arc of radius 300 px. The oracle evaluates the same
        // covariance eigenvalue ratio on the exact continuous arc.
        let r = 300.0f64;
        let mut pts = Vec::new();
        for i in 0..=3000 {
            let t = std::f64::consts::FRAC_PI_2 * i as f64 / 3000.0;
            pts.push(((r * t.cos()).round() as i64, (r * t.sin()).round() as i64 + 2));
        }
        pts.dedup();
        let img = image_from_points(&pts, 320, 320);
        let measured = linearity(&img).unwrap();

        // Continuous arc (cos t, sin t), t in [0, pi/2]: per unit arc length
        // var = 1/2 - (2/pi)^2 on each axis and cov = 1/pi - (2/pi)^2.
        let var = 0.5 - (2.0 / std::f64::consts::PI).powi(2);
        let cov = 1.0 / std::f64::consts::PI - (2.0 / std::f64::consts::PI).powi(2);
        let oracle = (var - cov.abs()) / (var + cov.abs());
        assert_relative_eq!(measured, oracle, max_relative = 0.05);
        assert!(oracle > 0.02, "a quarter arc must trip the ellipse branch");
    }

    #[test]
    fn quadratic_fit_recovers_exact_polynomials() {
        let pts: Vec<(f64, f64)> = (0..120)
            .map(|i| {
                let u = i as f64;
                (u, 0.002 * u * u - 0.3 * u + 40.0)
            })
            .collect();
        let fit = fit_quadratic_points(&pts).unwrap();
        assert_relative_eq!(fit.a, 0.002, max_relative = 1e-9);
        assert_relative_eq!(fit.b, -0.3, max_relative = 1e-9);
        assert_relative_eq!(fit.c, 40.0, max_relative = 1e-9);
        assert!(fit.residual_rms < 1e-9);
    }

    #[test]
    fn quadratic_fit_residual_tracks_injected_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let sigma = 0.8;
        let pts: Vec<(f64, f64)> = (0..400)
            .map(|i| {
                let u = i as f64;
                let n: f64 = {
                    let a: f64 = 1.0 - rng.gen::<f64>();
                    let b: f64 = rng.gen();
                    (-2.0 * a.ln()).sqrt() * (2.0 * std::f64::consts::PI * b).cos()
                };
                (u, 0.001 * u * u + 10.0 + sigma * n)
            })
            .collect();
        let fit = fit_quadratic_points(&pts).unwrap();
        assert!(
            (fit.residual_rms - sigma).abs() < 0.2 * sigma,
            "residual {} should approximate sigma {}",
            fit.residual_rms,
            sigma
        );
    }

    #[test]
    fn quadratic_fit_rejects_vertical_band() {
        let pts: Vec<(f64, f64)> = (0..50).map(|v| (33.0, v as f64)).collect();
        assert!(matches!(
            fit_quadratic_points(&pts),
            Err(VisionError::RankDeficient(_))
        ));
    }

    #[test]
    fn ellipse_fit_recovers_axis_aligned_circle_and_rotated_ellipse() {
        let pts: Vec<(f64, f64)> = (0..64)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / 64.0;
                (200.0 + 80.0 * t.cos(), 150.0 + 80.0 * t.sin())
            })
            .collect();
        let fit = fit_ellipse_points(&pts).unwrap();
        assert_relative_eq!(fit.center.0, 200.0, epsilon = 1e-6);
        assert_relative_eq!(fit.center.1, 150.0, epsilon = 1e-6);
        assert_relative_eq!(fit.semi_major, 80.0, max_relative = 1e-8);
        assert_relative_eq!(fit.semi_minor, 80.0, max_relative = 1e-8);

        let phi = 0.5235987755982988f64;
        let (sp, cp) = phi.sin_cos();
        let pts: Vec<(f64, f64)> = (0..90)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / 90.0;
                let x = 100.0 * t.cos();
                let y = 50.0 * t.sin();
                (300.0 + cp * x - sp * y, 240.0 + sp * x + cp * y)
            })
            .collect();
        let fit = fit_ellipse_points(&pts).unwrap();
        assert_relative_eq!(fit.semi_major, 100.0, max_relative = 1e-8);
        assert_relative_eq!(fit.semi_minor, 50.0, max_relative = 1e-8);
        assert_relative_eq!(fit.orientation, phi, epsilon = 1e-8);
        assert_relative_eq!(fit.center.0, 300.0, epsilon = 1e-6);
        assert_relative_eq!(fit.center.1, 240.0, epsilon = 1e-6);
        assert!(fit.residual_rms < 1e-10);
    }

    #[test]
    fn ellipse_fit_on_partial_arc_recovers_the_generating_ellipse() {
        // Only a 100-degree arc, matching what a bent robot band exposes.
        let pts: Vec<(f64, f64)> = (0..80)
            .map(|i| {
                let t = -0.2 + 1.75 * i as f64 / 79.0;
                (220.0 + 130.0 * t.cos(), 260.0 + 70.0 * t.sin())
            })
            .collect();
        let fit = fit_ellipse_points(&pts).unwrap();
        assert_relative_eq!(fit.semi_major, 130.0, max_relative = 1e-6);
        assert_relative_eq!(fit.semi_minor, 70.0, max_relative = 1e-6);
        assert_relative_eq!(fit.center.0, 220.0, epsilon = 1e-4);
        assert_relative_eq!(fit.center.1, 260.0, epsilon = 1e-4);
    }

    #[test]
    fn ellipse_fit_rejects_collinear_points() {
        let pts: Vec<(f64, f64)> = (0..30).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        assert!(matches!(
            fit_ellipse_points(&pts),
            Err(VisionError::DegenerateConic(_)) | Err(VisionError::RankDeficient(_))
        ));
    }

    #[test]
    fn trace_on_straight_band_stops_at_the_far_ends() {
        let bar: Vec<(i64, i64)> = (20..220).map(|u| (u, 60)).collect();
        let img = image_from_points(&bar, 256, 128);
        let fit = ConicFit::Quadratic(fit_quadratic(&img).unwrap());
        let g = centroid(&img).unwrap();
        let res = trace_to_tip(&img, &fit, g, &VisionOptions::default()).unwrap();
        // Both ends are symmetric; the tip must land within the stop window
        // of either end and the slope must vanish.
        assert!(res.theta_l.abs() < 1e-9);
        assert!(
            (res.tip.0 - 221.0).abs() <= 1.0 || (res.tip.0 - 19.0).abs() <= 1.0,
            "tip {:?} should sit just past an end of the band",
            res.tip
        );
    }

    #[test]
    fn trace_start_off_band_is_an_error() {
        let bar: Vec<(i64, i64)> = (20..60).map(|u| (u, 10)).collect();
        let img = image_from_points(&bar, 128, 64);
        let fit = ConicFit::Quadratic(QuadraticFit {
            a: 0.0,
            b: 0.0,
            c: 50.0,
            residual_rms: 0.0,
        });
        assert!(matches!(
            trace_to_tip(&img, &fit, (40.0, 50.0), &VisionOptions::default()),
            Err(VisionError::StartOffForeground { .. })
        ));
    }

    #[test]
    fn trace_picks_the_end_with_larger_slope_magnitude() {
        // Clamped-base parabola band: flat at the left end, sloped at the
        // right end. The tracer must report the right end.
        let pts: Vec<(i64, i64)> = (0..180)
            .map(|u| {
                let v = 200.0 - 0.003 * (u as f64) * (u as f64);
                (u + 10, v.round() as i64)
            })
            .collect();
        let img = image_from_points(&pts, 256, 256);
        let fit = ConicFit::Quadratic(fit_quadratic(&img).unwrap());
        let g = centroid(&img).unwrap();
        let res = trace_to_tip(&img, &fit, g, &VisionOptions::default()).unwrap();
        assert!(
            res.tip.0 > 180.0,
            "tip {:?} should be at the steep right end",
            res.tip
        );
        // Image slope at the right end is dv/du ~ -0.003*2*190 ~ -1.1;
        // the robot-frame angle negates the image slope angle.
        let expected = (0.006 * res.tip.0).atan();
        assert_relative_eq!(res.theta_l, expected, max_relative = 0.05);
    }

    #[test]
    fn quarter_arc_goes_to_ellipse_branch_and_tip_lands_on_the_far_end() {
        // Quarter circle clamped horizontally at the left end and curling
        // upward: world points (r sin p, r (1 - cos p)), heading p, so the
        // free end sits at (r, r) with heading pi/2.
        let r = 140.0f64;
        let u0 = 30.0;
        let v0 = 200.0;
        let mut img = BinaryImage::new(360, 360);
        for i in 0..=4000 {
            let p = std::f64::consts::FRAC_PI_2 * i as f64 / 4000.0;
            let u = (u0 + r * p.sin()).round() as i64;
            let v = (v0 - r * (1.0 - p.cos())).round() as i64;
            for du in 0..2 {
                for dv in 0..2 {
                    img.set(u + du, v + dv);
                }
            }
        }
        let res = tip_angle_from_image(&img, &VisionOptions::default()).unwrap();
        assert_eq!(res.branch, Branch::Ellipse);
        assert!((res.tip.0 - (u0 + r)).abs() < 4.0, "tip {:?}", res.tip);
        assert!((res.tip.1 - (v0 - r)).abs() < 4.0, "tip {:?}", res.tip);
        assert!(
            (res.theta_l - std::f64::consts::FRAC_PI_2).abs() < 0.12,
            "theta_l {}",
            res.theta_l
        );
    }

    #[test]
    fn straight_shape_reads_back_as_zero_angle() {
        let params = RobotParams::mscr1();
        let plane = Plane::default();
        let mut solver = BvpSolver::new(params, plane, SolverSettings::default()).unwrap();
        let act = Actuation {
            magnet_position: nalgebra::Vector3::new(params.length, 0.18, 0.0),
            psi: 0.0,
            moment: 0.0,
        };
        let shape = solver.solve(&act).unwrap();
        let img = rasterize(&shape, 0.0001, 3, 320, 240).unwrap();
        let res = tip_angle_from_image(&img, &VisionOptions::default()).unwrap();
        assert_eq!(res.branch, Branch::Quadratic);
        assert!(res.theta_l.abs() < 0.01, "theta_l {}", res.theta_l);
    }

    #[test]
    fn round_trip_matches_solver_tip_angle_across_the_workspace() {
        // Shapes spanning the reachable tip-angle range at the reference
        // magnet height; all are gentle enough for the quadratic branch.
        for psi in [-2.0, -1.40, -0.7, 0.0, 0.8, 1.56, 2.4] {
            let params = RobotParams::mscr1();
            let plane = Plane::default();
            let mut solver = BvpSolver::new(params, plane, SolverSettings::default()).unwrap();
            let act = Actuation {
                magnet_position: nalgebra::Vector3::new(params.length, 0.18, 0.0),
                psi,
                moment: 342.86,
            };
            let shape = solver.solve(&act).unwrap();
            let img = rasterize(&shape, 0.0001, 3, 640, 480).unwrap();
            let res = tip_angle_from_image(&img, &VisionOptions::default()).unwrap();
            assert!(
                (res.theta_l - shape.tip_angle()).abs() < 0.03,
                "measured {} vs solver {} (psi={psi})",
                res.theta_l,
                shape.tip_angle()
            );
        }
    }

    #[test]
    fn round_trip_bias_stays_bounded_for_strong_bends() {
        // Conic tangents systematically overestimate the tip angle of a
        // moment-free elastica end (the band's curvature vanishes there while
        // a conic's does not), so strong bends carry a bias of roughly 10-15%
        // on either branch. This pins the measured envelope.
        let cases = [(0.13, 1.77, 0.6), (0.10, 2.553, 1.37)];
        for (h, psi, approx_theta) in cases {
            let plane = Plane::default();
            let mut solver =
                BvpSolver::new(RobotParams::mscr2(), plane, SolverSettings::default()).unwrap();
            let act = Actuation {
                magnet_position: nalgebra::Vector3::new(0.03, h, 0.0),
                psi,
                moment: 342.86,
            };
            let shape = solver.solve(&act).unwrap();
            assert!((shape.tip_angle() - approx_theta).abs() < 0.05);
            let img = rasterize(&shape, 0.0001, 3, 640, 480).unwrap();
            let res = tip_angle_from_image(&img, &VisionOptions::default()).unwrap();
            let err = (res.theta_l - shape.tip_angle()).abs();
            assert!(
                err < 0.16 * shape.tip_angle().abs().max(0.5),
                "error {err} too large for theta {}",
                shape.tip_angle()
            );
        }
    }

    #[test]
    fn branch_gate_sends_gentle_bends_to_quadratic_and_strong_to_ellipse() {
        let plane = Plane::default();
        let mut solver =
            BvpSolver::new(RobotParams::mscr2(), plane, SolverSettings::default()).unwrap();
        let strong = solver
            .solve(&Actuation {
                magnet_position: nalgebra::Vector3::new(0.03, 0.10, 0.0),
                psi: 2.553,
                moment: 342.86,
            })
            .unwrap();
        assert!(strong.tip_angle() > 1.2);
        let img = rasterize(&strong, 0.0001, 3, 640, 480).unwrap();
        let res = tip_angle_from_image(&img, &VisionOptions::default()).unwrap();
        assert_eq!(res.branch, Branch::Ellipse);

        let mut solver =
            BvpSolver::new(RobotParams::mscr1(), plane, SolverSettings::default()).unwrap();
        let gentle = solver
            .solve(&Actuation {
                magnet_position: nalgebra::Vector3::new(0.024, 0.18, 0.0),
                psi: 1.0,
                moment: 342.86,
            })
            .unwrap();
        assert!(gentle.tip_angle().abs() < 0.3);
        let img = rasterize(&gentle, 0.0001, 3, 640, 480).unwrap();
        let res = tip_angle_from_image(&img, &VisionOptions::default()).unwrap();
        assert_eq!(res.branch, Branch::Quadratic);
    }

    #[test]
    fn measured_angle_is_translation_invariant() {
        let params = RobotParams::mscr1();
        let plane = Plane::default();
        let mut solver = BvpSolver::new(params, plane, SolverSettings::default()).unwrap();
        let act = Actuation {
            magnet_position: nalgebra::Vector3::new(params.length, 0.18, 0.0),
            psi: 1.3,
            moment: 342.86,
        };
        let shape = solver.solve(&act).unwrap();
        let img = rasterize(&shape, 0.0001, 3, 640, 480).unwrap();

        let mut shifted = BinaryImage::new(640, 480);
        for (u, v) in img.foreground_points() {
            shifted.set(u as i64 + 57, v as i64 + 83);
        }
        let a = tip_angle_from_image(&img, &VisionOptions::default()).unwrap();
        let b = tip_angle_from_image(&shifted, &VisionOptions::default()).unwrap();
        assert!(
            (a.theta_l - b.theta_l).abs() < 1e-6,
            "translation changed the angle: {} vs {}",
            a.theta_l,
            b.theta_l
        );
    }

    #[test]
    fn rasterized_band_has_requested_thickness_and_length() {
        let params = RobotParams::mscr1();
        let plane = Plane::default();
        let mut solver = BvpSolver::new(params, plane, SolverSettings::default()).unwrap();
        let shape = solver
            .solve(&Actuation {
                magnet_position: nalgebra::Vector3::new(params.length, 0.18, 0.0),
                psi: 0.0,
                moment: 0.0,
            })
            .unwrap();
        let pitch = 0.0001;
        let img = rasterize(&shape, pitch, 3, 320, 240).unwrap();
        // Straight band: every occupied column must hold exactly 3 pixels.
        let mut cols = std::collections::BTreeMap::new();
        for (u, _) in img.foreground_points() {
            *cols.entry(u as i64).or_insert(0) += 1;
        }
        assert!(cols.values().all(|&c| c == 3));
        let span = cols.keys().max().unwrap() - cols.keys().min().unwrap();
        let expected = params.length / pitch;
        assert!(
            (span as f64 - expected).abs() <= 3.0,
            "span {span} px vs expected {expected}"
        );
    }

    #[test]
    fn rasterize_rejects_canvases_that_cannot_hold_the_shape() {
        let params = RobotParams::mscr1();
        let plane = Plane::default();
        let mut solver = BvpSolver::new(params, plane, SolverSettings::default()).unwrap();
        let shape = solver
            .solve(&Actuation {
                magnet_position: nalgebra::Vector3::new(params.length, 0.18, 0.0),
                psi: 0.0,
                moment: 0.0,
            })
            .unwrap();
        assert!(matches!(
            rasterize(&shape, 0.0001, 3, 100, 100),
            Err(VisionError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn pgm_round_trip_preserves_every_pixel() {
        let pts: Vec<(i64, i64)> = (0..30).map(|i| (i * 2, (i * i) % 40)).collect();
        let img = image_from_points(&pts, 64, 48);
        let dir = std::env::temp_dir().join("mscr_vision_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("band.pgm");
        img.write_pgm(&path).unwrap();
        let back = BinaryImage::read(&path).unwrap();
        assert_eq!(back.width(), img.width());
        assert_eq!(back.height(), img.height());
        assert_eq!(back.foreground_points(), img.foreground_points());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pbm_bits_and_comments_parse_correctly() {
        // 10x2 PBM: row 0 has bits 0 and 9 set, row 1 has bit 4 set.
        let raw = b"P4\n# a comment\n10 2\n\x80\x40\x08\x00".to_vec();
        let img = BinaryImage::parse(&raw).unwrap();
        assert_eq!(img.width(), 10);
        assert_eq!(img.height(), 2);
        assert_eq!(
            img.foreground_points(),
            vec![(0.0, 0.0), (9.0, 0.0), (4.0, 1.0)]
        );
    }

    #[test]
    fn malformed_image_files_are_rejected() {
        assert!(matches!(
            BinaryImage::parse(b"P6\n2 2\n255\n0123"),
            Err(VisionError::BadFormat(_))
        ));
        assert!(matches!(
            BinaryImage::parse(b"P5\n4 4\n255\nxx"),
            Err(VisionError::BadFormat(_))
        ));
    }
}
