//! Five-point landmarks and the closed-form similarity fit.

use std::path::Path;

use crate::error::{Error, Result};

/// Five `(x, y)` points: left eye, right eye, nose tip, left and right mouth corner.
///
/// Coordinates are in pixel-index space, so the centre of pixel `(row, col)`
/// sits at `(col, row)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkSet {
    points: [[f64; 2]; 5],
}

/// ArcFace reference points for a 112×112 crop.
pub const ARCFACE_112: [[f64; 2]; 5] = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

impl LandmarkSet {
    pub fn new(points: [[f64; 2]; 5]) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateLandmarks("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]; 5] {
        &self.points
    }

    pub fn centroid(&self) -> [f64; 2] {
        let mut c = [0.0; 2];
        for p in &self.points {
            c[0] += p[0] / 5.0;
            c[1] += p[1] / 5.0;
        }
        c
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Result<Self> {
        Self::new(self.points.map(f))
    }

    /// Parses five lines of `x y`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pts = Vec::with_capacity(5);
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let nums: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("landmark `{line}`: {e}"))))
                .collect::<Result<_>>()?;
            if nums.len() != 2 {
                return Err(Error::Parse(format!("landmark line `{line}` must hold two numbers")));
            }
            pts.push([nums[0], nums[1]]);
        }
        let points: [[f64; 2]; 5] = pts
            .try_into()
            .map_err(|v: Vec<_>| Error::Parse(format!("expected 5 landmarks, found {}", v.len())))?;
        Self::new(points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.points.iter().map(|p| format!("{} {}\n", p[0], p[1])).collect()
    }
}

/// Landmark positions inside a square crop of side `size`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Template {
    pub points: LandmarkSet,
    pub size: f64,
}

impl Template {
    pub fn arcface() -> Self {
        Self {
            points: LandmarkSet { points: ARCFACE_112 },
            size: 112.0,
        }
    }

    /// The same template for a crop of side `resolution`, scaled about pixel edges.
    pub fn at_resolution(&self, resolution: usize) -> LandmarkSet {
        let k = resolution as f64 / self.size;
        LandmarkSet {
            points: self.points.points.map(|p| [(p[0] + 0.5) * k - 0.5, (p[1] + 0.5) * k - 0.5]),
        }
    }

    /// Reads a template file: an optional `size N` line followed by five points.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut size = 112.0;
        let mut rest = String::new();
        for line in text.lines() {
            match line.trim().strip_prefix("size") {
                Some(v) => {
                    size = v.trim().parse().map_err(|e| Error::Parse(format!("template size: {e}")))?;
                }
                None => {
                    rest.push_str(line);
                    rest.push('\n');
                }
            }
        }
        if !(size > 0.0) {
            return Err(Error::Parse("template size must be positive".into()));
        }
        Ok(Self {
            points: LandmarkSet::parse(&rest)?,
            size,
        })
    }
}

/// `p ↦ [[a, -b], [b, a]] p + t`: rotation, uniform scale and translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn from_parts(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        Self {
            a: scale * angle.cos(),
            b: scale * angle.sin(),
            tx,
            ty,
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a * p[0] - self.b * p[1] + self.tx,
            self.b * p[0] + self.a * p[1] + self.ty,
        ]
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn angle(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn inverse(&self) -> Self {
        let d = self.a * self.a + self.b * self.b;
        let (a, b) = (self.a / d, -self.b / d);
        Self {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        }
    }

    /// `self ∘ other`, applying `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let [tx, ty] = self.apply([other.tx, other.ty]);
        Self {
            a: self.a * other.a - self.b * other.b,
            b: self.b * other.a + self.a * other.b,
            tx,
            ty,
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.a, -self.b, self.tx], [self.b, self.a, self.ty]]
    }
}

/// Least-squares similarity taking `detected` onto `template`.
///
/// With both sets centred, the optimum is `a = Σ p·q / Σ|p|²` and
/// `b = Σ p×q / Σ|p|²`; the translation then matches the centroids.
pub fn estimate_similarity_transform(detected: &LandmarkSet, template: &LandmarkSet) -> Result<Similarity> {
    let pc = detected.centroid();
    let qc = template.centroid();
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    let (mut dot, mut cross) = (0.0, 0.0);
    for (p, q) in detected.points.iter().zip(&template.points) {
        let (px, py) = (p[0] - pc[0], p[1] - pc[1]);
        let (qx, qy) = (q[0] - qc[0], q[1] - qc[1]);
        sxx += px * px;
        syy += py * py;
        sxy += px * py;
        dot += px * qx + py * qy;
        cross += px * qy - py * qx;
    }
    // Eigenvalues of the 2×2 scatter matrix.
    let half_tr = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy).sqrt();
    let (hi, lo) = (half_tr + disc, half_tr - disc);
    if hi < 1e-8 {
        return Err(Error::DegenerateLandmarks("points are coincident".into()));
    }
    if lo < 1e-8 * hi {
        return Err(Error::DegenerateLandmarks("points are collinear".into()));
    }
    let norm = sxx + syy;
    let (a, b) = (dot / norm, cross / norm);
    Ok(Similarity {
        a,
        b,
        tx: qc[0] - (a * pc[0] - b * pc[1]),
        ty: qc[1] - (b * pc[0] + a * pc[1]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> LandmarkSet {
        Template::arcface().points
    }

    fn close(a: &Similarity, b: &Similarity, tol: f64) -> bool {
        (a.a - b.a).abs() < tol && (a.b - b.b).abs() < tol && (a.tx - b.tx).abs() < tol && (a.ty - b.ty).abs() < tol
    }

    #[test]
    fn identity_when_detected_equals_template() {
        let t = estimate_similarity_transform(&template(), &template()).unwrap();
        assert!(close(&t, &Similarity::IDENTITY, 1e-12), "{t:?}");
    }

    #[test]
    fn quarter_turn_about_centroid_is_undone() {
        let c = template().centroid();
        let rot = Similarity::from_parts(1.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let about = Similarity {
            tx: c[0],
            ty: c[1],
            ..Similarity::IDENTITY
        }
        .compose(&rot)
        .compose(&Similarity {
            tx: -c[0],
            ty: -c[1],
            ..Similarity::IDENTITY
        });
        let detected = template().map(|p| about.apply(p)).unwrap();
        let t = estimate_similarity_transform(&detected, &template()).unwrap();
        assert!((t.scale() - 1.0).abs() < 1e-6);
        assert!((t.angle() + std::f64::consts::FRAC_PI_2).abs() < 1e-6);
        assert!(close(&t, &about.inverse(), 1e-6));
    }

    #[test]
    fn doubled_points_give_half_scale() {
        let detected = template().map(|p| [2.0 * p[0], 2.0 * p[1]]).unwrap();
        let t = estimate_similarity_transform(&detected, &template()).unwrap();
        assert!((t.scale() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn degenerate_sets_are_rejected() {
        let same = LandmarkSet::new([[3.0, 4.0]; 5]).unwrap();
        assert!(matches!(
            estimate_similarity_transform(&same, &template()),
            Err(Error::DegenerateLandmarks(_))
        ));
        let line = LandmarkSet::new([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]]).unwrap();
        assert!(estimate_similarity_transform(&line, &template()).is_err());
        assert!(LandmarkSet::new([[f64::NAN, 0.0]; 5]).is_err());
    }

    #[test]
    fn parse_round_trip() {
        let t = template();
        assert_eq!(LandmarkSet::parse(&t.to_text()).unwrap(), t);
        assert!(LandmarkSet::parse("1 2\n3 4\n").is_err());
        assert!(LandmarkSet::parse("1 2 3\n").is_err());
    }

    #[test]
    fn template_scaling_keeps_pixel_edges() {
        let t = Template::arcface();
        assert_eq!(t.at_resolution(112), t.points);
        let p = t.at_resolution(224).points()[0];
        assert!((p[0] - (38.2946 * 2.0 + 0.5)).abs() < 1e-12);
    }
}
