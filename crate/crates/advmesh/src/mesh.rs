//! Triangle meshes with per-vertex RGB texture: primitive initializers,
//! directional extent queries, corner-anchored placement, displacement
//! clamping, and OBJ I/O.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{vec_add, vec_dot, vec_norm, vec_scale, BBox3D, Mat3, Vec3};

/// Largest supported placement gap, the farthest distance exercised by the
/// distance-robustness protocol.
pub const D_MAX: f64 = 3.0;

/// Triangle mesh in its local frame (origin at the construction center),
/// with per-vertex RGB texture in [0,1].
///
/// `base_vertices` freezes the initial geometry; the attack loop clamps every
/// optimized vertex back into a box of half-width `cap` around its base.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub texture: Vec<Vec3>,
    pub base_vertices: Vec<Vec3>,
}

/// Rigid pose of a mesh in the ego frame. Rotation is fixed to the identity:
/// the mesh is expressed directly in ego-aligned axes and only translated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshPose {
    pub center: Vec3,
}

impl MeshPose {
    pub fn rotation(&self) -> Mat3 {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    }
}

/// The primitive shapes evaluated by the shape ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveShape {
    Cylinder,
    Cube,
    Sphere,
}

impl PrimitiveShape {
    pub fn name(self) -> &'static str {
        match self {
            PrimitiveShape::Cylinder => "cylinder",
            PrimitiveShape::Cube => "cube",
            PrimitiveShape::Sphere => "sphere",
        }
    }
}

impl std::str::FromStr for PrimitiveShape {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cylinder" => Ok(PrimitiveShape::Cylinder),
            "cube" => Ok(PrimitiveShape::Cube),
            "sphere" => Ok(PrimitiveShape::Sphere),
            other => Err(format!("unknown shape '{other}' (expected cylinder|cube|sphere)")),
        }
    }
}

impl Mesh {
    fn finalize(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>, texture: Vec<Vec3>) -> Mesh {
        let mesh = Mesh { base_vertices: vertices.clone(), vertices, faces, texture };
        mesh.validate().expect("constructed mesh failed validation");
        mesh
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if self.vertices.is_empty() {
            return Err(Error::Data("mesh has no vertices".into()));
        }
        if self.texture.len() != self.vertices.len() {
            return Err(Error::Data(format!(
                "texture count {} != vertex count {}",
                self.texture.len(),
                self.vertices.len()
            )));
        }
        if self.base_vertices.len() != self.vertices.len() {
            return Err(Error::Data("base_vertices count mismatch".into()));
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f[0] >= n || f[1] >= n || f[2] >= n {
                return Err(Error::Data(format!("face {i} references vertex out of range: {f:?}")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Data(format!("face {i} is degenerate: {f:?}")));
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Flat (n*3) copies for tape leaves.
    pub fn vertices_flat(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    pub fn texture_flat(&self) -> Vec<f64> {
        self.texture.iter().flatten().copied().collect()
    }

    pub fn set_vertices_flat(&mut self, data: &[f64]) {
        assert_eq!(data.len(), self.vertices.len() * 3);
        for (i, v) in self.vertices.iter_mut().enumerate() {
            *v = [data[3 * i], data[3 * i + 1], data[3 * i + 2]];
        }
    }

    pub fn set_texture_flat(&mut self, data: &[f64]) {
        assert_eq!(data.len(), self.texture.len() * 3);
        for (i, t) in self.texture.iter_mut().enumerate() {
            *t = [data[3 * i], data[3 * i + 1], data[3 * i + 2]];
        }
    }
}

/// Deterministic primitive initializer at the evaluated shapes and sizes:
/// cylinder radius 0.3 / height 2.0, cube edge 0.9 (10x10 grids per face),
/// icosphere radius 0.5 (4 subdivisions). Initial texture is mid-gray.
pub fn init_primitive(shape: PrimitiveShape) -> Mesh {
    match shape {
        PrimitiveShape::Cylinder => cylinder(0.3, 2.0, 40, 40),
        PrimitiveShape::Cube => cube(0.9, 10),
        PrimitiveShape::Sphere => icosphere(0.5, 4),
    }
}

fn gray(n: usize) -> Vec<Vec3> {
    vec![[0.5, 0.5, 0.5]; n]
}

/// Cylinder along +z: `segments` around, `bands` vertical subdivisions,
/// capped with center-fan discs. 40x40 gives 1642 vertices / 3280 faces.
fn cylinder(radius: f64, height: f64, segments: usize, bands: usize) -> Mesh {
    let rings = bands + 1;
    let mut vertices = Vec::with_capacity(segments * rings + 2);
    for k in 0..rings {
        let z = -height / 2.0 + height * k as f64 / bands as f64;
        for s in 0..segments {
            let a = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push([radius * a.cos(), radius * a.sin(), z]);
        }
    }
    let bottom_center = vertices.len() as u32;
    vertices.push([0.0, 0.0, -height / 2.0]);
    let top_center = vertices.len() as u32;
    vertices.push([0.0, 0.0, height / 2.0]);

    let ring = |k: usize, s: usize| (k * segments + s % segments) as u32;
    let mut faces = Vec::with_capacity(2 * segments * bands + 2 * segments);
    for k in 0..bands {
        for s in 0..segments {
            let a = ring(k, s);
            let b = ring(k, s + 1);
            let c = ring(k + 1, s + 1);
            let d = ring(k + 1, s);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    for s in 0..segments {
        faces.push([bottom_center, ring(0, s + 1), ring(0, s)]);
        faces.push([top_center, ring(bands, s), ring(bands, s + 1)]);
    }
    let n = vertices.len();
    Mesh::finalize(vertices, faces, gray(n))
}

/// Cube of the given edge built from six independent (n+1)x(n+1) vertex grids
/// (grid vertices are not shared across cube edges). n=10 gives 726 vertices
/// and 1200 faces.
fn cube(edge: f64, n: usize) -> Mesh {
    // (normal, u tangent, v tangent) with u x v = normal
    let axes: [(Vec3, Vec3, Vec3); 6] = [
        ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
        ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
        ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
        ([0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        ([0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]),
    ];
    let half = edge / 2.0;
    let mut vertices = Vec::with_capacity(6 * (n + 1) * (n + 1));
    let mut faces = Vec::with_capacity(6 * n * n * 2);
    for (normal, u, v) in axes {
        let base = vertices.len() as u32;
        for i in 0..=n {
            for j in 0..=n {
                let fu = i as f64 / n as f64 - 0.5;
                let fv = j as f64 / n as f64 - 0.5;
                let p = vec_add(
                    vec_scale(normal, half),
                    vec_add(vec_scale(u, fu * edge), vec_scale(v, fv * edge)),
                );
                vertices.push(p);
            }
        }
        let g = |i: usize, j: usize| base + (i * (n + 1) + j) as u32;
        for i in 0..n {
            for j in 0..n {
                faces.push([g(i, j), g(i + 1, j), g(i + 1, j + 1)]);
                faces.push([g(i, j), g(i + 1, j + 1), g(i, j + 1)]);
            }
        }
    }
    let count = vertices.len();
    Mesh::finalize(vertices, faces, gray(count))
}

/// Icosphere: subdivided icosahedron with midpoints pushed to the radius.
/// 4 subdivisions give 2562 vertices / 5120 faces.
fn icosphere(radius: f64, subdivisions: usize) -> Mesh {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let raw: [Vec3; 12] = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut vertices: Vec<Vec3> = raw.iter().map(|v| vec_scale(*v, radius / vec_norm(*v))).collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoints.entry(key).or_insert_with(|| {
                    let m = vec_scale(vec_add(vertices[a as usize], vertices[b as usize]), 0.5);
                    let m = vec_scale(m, radius / vec_norm(m));
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    let n = vertices.len();
    Mesh::finalize(vertices, faces, gray(n))
}

/// Maximal distance from the mesh origin to any vertex along `direction`.
pub fn max_extent(mesh: &Mesh, direction: Vec3) -> f64 {
    assert!(
        (vec_norm(direction) - 1.0).abs() < 1e-9,
        "max_extent: direction must be a unit vector, |d| = {}",
        vec_norm(direction)
    );
    assert!(!mesh.vertices.is_empty(), "max_extent: empty mesh");
    mesh.vertices.iter().map(|v| vec_dot(*v, direction)).fold(f64::NEG_INFINITY, f64::max)
}

/// Place the mesh against a corner of the target box:
/// `center = corner + (max_extent(mesh, -direction) + d) * direction`.
///
/// `direction` must lie in the outward normal cone of the chosen corner
/// (non-negative dot with each of the corner's three outward face normals);
/// together with the extent offset this guarantees no mesh vertex lies
/// strictly inside the box for any d >= 0.
pub fn place(mesh: &Mesh, target: &BBox3D, corner_index: usize, direction: Vec3, d: f64) -> Result<MeshPose> {
    assert!(corner_index < 8, "corner index {corner_index} out of range");
    assert!((vec_norm(direction) - 1.0).abs() < 1e-9, "place: direction must be a unit vector");
    if !(0.0..D_MAX).contains(&d) {
        return Err(Error::Config(format!("placement distance {d} outside [0, {D_MAX})")));
    }
    for normal in corner_outward_normals(target, corner_index) {
        if vec_dot(direction, normal) < -1e-9 {
            return Err(Error::Config(format!(
                "direction {direction:?} points into the target box at corner {corner_index}"
            )));
        }
    }
    let corner = target.corners()[corner_index];
    let extent = max_extent(mesh, vec_scale(direction, -1.0));
    Ok(MeshPose { center: vec_add(corner, vec_scale(direction, extent + d)) })
}

/// The three outward face normals meeting at a corner, in ego frame.
pub fn corner_outward_normals(b: &BBox3D, corner_index: usize) -> [Vec3; 3] {
    let (s, c) = b.yaw.sin_cos();
    let local_l: Vec3 = if corner_index & 4 == 0 { [-1.0, 0.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let local_w: Vec3 = if corner_index & 2 == 0 { [0.0, 1.0, 0.0] } else { [0.0, -1.0, 0.0] };
    let local_h: Vec3 = if corner_index & 1 == 0 { [0.0, 0.0, -1.0] } else { [0.0, 0.0, 1.0] };
    let rot = |v: Vec3| [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]];
    [rot(local_l), rot(local_w), rot(local_h)]
}

/// Clamp vertex displacement to `cap` around the frozen base geometry and the
/// texture to [0,1]. Applied after every optimizer step.
pub fn clamp_displacement(mesh: &mut Mesh, cap: f64) {
    assert!(cap > 0.0, "clamp_displacement: cap must be positive");
    for (v, base) in mesh.vertices.iter_mut().zip(mesh.base_vertices.iter()) {
        for k in 0..3 {
            v[k] = v[k].clamp(base[k] - cap, base[k] + cap);
        }
    }
    for t in mesh.texture.iter_mut() {
        for k in 0..3 {
            t[k] = t[k].clamp(0.0, 1.0);
        }
    }
}

// --- OBJ I/O -----------------------------------------------------------------

/// Write the mesh as OBJ with 6-component vertex records (`v x y z r g b`).
/// Floats are printed with full round-trip precision.
pub fn save_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (v, t) in mesh.vertices.iter().zip(mesh.texture.iter()) {
        writeln!(out, "v {} {} {} {} {} {}", v[0], v[1], v[2], t[0], t[1], t[2]).expect("string write");
    }
    for f in &mesh.faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a triangles-only OBJ. Vertex colors are read from 6-component vertex
/// records and default to mid-gray otherwise.
pub fn load_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut texture: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| {
                            Error::Data(format!("{}:{lineno}: bad vertex component '{t}'", path.display()))
                        })
                    })
                    .collect::<Result<_>>()?;
                match nums.len() {
                    3 => {
                        vertices.push([nums[0], nums[1], nums[2]]);
                        texture.push([0.5, 0.5, 0.5]);
                    }
                    6 => {
                        vertices.push([nums[0], nums[1], nums[2]]);
                        texture.push([nums[3], nums[4], nums[5]]);
                    }
                    n => {
                        return Err(Error::Data(format!(
                            "{}:{lineno}: vertex record has {n} components (expected 3 or 6)",
                            path.display()
                        )))
                    }
                }
            }
            Some("f") => {
                let idx: Vec<&str> = it.collect();
                if idx.len() != 3 {
                    return Err(Error::Data(format!(
                        "{}:{lineno}: face has {} vertices, only triangles are supported",
                        path.display(),
                        idx.len()
                    )));
                }
                let mut tri = [0u32; 3];
                for (k, tok) in idx.iter().enumerate() {
                    let lead = tok.split('/').next().unwrap_or("");
                    let i: i64 = lead.parse().map_err(|_| {
                        Error::Data(format!("{}:{lineno}: bad face index '{tok}'", path.display()))
                    })?;
                    if i < 1 {
                        return Err(Error::Data(format!(
                            "{}:{lineno}: face index {i} out of range",
                            path.display()
                        )));
                    }
                    tri[k] = (i - 1) as u32;
                }
                faces.push(tri);
            }
            // other record types (vn, vt, o, g, usemtl, s, ...) are ignored
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err(Error::Data(format!("{}: no vertices", path.display())));
    }
    let mesh = Mesh { base_vertices: vertices.clone(), vertices, faces, texture };
    mesh.validate()?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{vec_sub, Category};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::f64::consts::PI;

    #[test]
    fn cube_has_paper_counts() {
        let m = init_primitive(PrimitiveShape::Cube);
        assert_eq!(m.vertex_count(), 726);
        assert_eq!(m.face_count(), 1200);
        // edge 0.9: extent 0.45 along each axis
        assert!((max_extent(&m, [1.0, 0.0, 0.0]) - 0.45).abs() < 1e-12);
        assert!((max_extent(&m, [0.0, 0.0, -1.0]) - 0.45).abs() < 1e-12);
    }

    #[test]
    fn sphere_has_paper_counts() {
        let m = init_primitive(PrimitiveShape::Sphere);
        assert_eq!(m.vertex_count(), 2562);
        assert_eq!(m.face_count(), 5120);
        for v in &m.vertices {
            assert!((vec_norm(*v) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn cylinder_counts_within_two_percent_of_paper() {
        let m = init_primitive(PrimitiveShape::Cylinder);
        assert_eq!(m.vertex_count(), 1642); // paper value exactly
        let face_err = (m.face_count() as f64 - 3240.0).abs() / 3240.0;
        assert!(face_err < 0.02, "face count {} deviates {face_err}", m.face_count());
        // radius 0.3 along -y, half-height 1.0 along +z
        assert!((max_extent(&m, [0.0, -1.0, 0.0]) - 0.3).abs() < 1e-9);
        assert!((max_extent(&m, [0.0, 0.0, 1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn primitives_are_deterministic() {
        for shape in [PrimitiveShape::Cylinder, PrimitiveShape::Cube, PrimitiveShape::Sphere] {
            let a = init_primitive(shape);
            let b = init_primitive(shape);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn max_extent_of_unit_sphere_is_one() {
        let m = icosphere(1.0, 4);
        // exactly 1.0 along a vertex direction
        let v0 = m.vertices[0];
        let d = vec_scale(v0, 1.0 / vec_norm(v0));
        assert!((max_extent(&m, d) - 1.0).abs() < 1e-12);
        // within vertex spacing of 1.0 along arbitrary directions
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let raw = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
            if vec_norm(raw) < 1e-3 {
                continue;
            }
            let d = vec_scale(raw, 1.0 / vec_norm(raw));
            let e = max_extent(&m, d);
            assert!(e <= 1.0 + 1e-12 && e > 0.998, "extent {e}");
        }
    }

    #[test]
    #[should_panic(expected = "unit vector")]
    fn max_extent_rejects_non_unit_direction() {
        let m = init_primitive(PrimitiveShape::Cube);
        max_extent(&m, [0.0, 2.0, 0.0]);
    }

    fn target_box() -> BBox3D {
        BBox3D::new([0.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0, Category::Vehicle)
    }

    #[test]
    fn place_sphere_outward_lateral() {
        // mirrored form of the corner placement rule: corner 0 carries the
        // +w/2 offset, so its outward lateral direction is +y at zero yaw
        let sphere = init_primitive(PrimitiveShape::Sphere);
        let pose = place(&sphere, &target_box(), 0, [0.0, 1.0, 0.0], 0.0).unwrap();
        assert!((pose.center[0] - -2.0).abs() < 1e-12);
        assert!((pose.center[1] - 1.5).abs() < 1e-12);
        assert!((pose.center[2] - -0.75).abs() < 1e-12);

        // corner 2 carries -w/2: direction -y, the lateral side of the
        // default attack policy
        let pose2 = place(&sphere, &target_box(), 2, [0.0, -1.0, 0.0], 0.0).unwrap();
        assert!((pose2.center[1] - -1.5).abs() < 1e-12);

        // offset rule: d shifts the center by d along the direction
        let pose3 = place(&sphere, &target_box(), 0, [0.0, 1.0, 0.0], 0.1).unwrap();
        assert!((pose3.center[1] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn place_rejects_bad_inputs() {
        let sphere = init_primitive(PrimitiveShape::Sphere);
        // direction pointing into the box
        assert!(place(&sphere, &target_box(), 0, [0.0, -1.0, 0.0], 0.1).is_err());
        assert!(place(&sphere, &target_box(), 0, [1.0, 0.0, 0.0], 0.1).is_err());
        // d out of range
        assert!(place(&sphere, &target_box(), 0, [0.0, 1.0, 0.0], 3.5).is_err());
        assert!(place(&sphere, &target_box(), 0, [0.0, 1.0, 0.0], -0.1).is_err());
    }

    #[test]
    fn place_surface_gap_along_direction_equals_d() {
        let cyl = init_primitive(PrimitiveShape::Cylinder);
        let b = target_box();
        let dir = [0.0, 1.0, 0.0];
        let d = 0.35;
        let pose = place(&cyl, &b, 0, dir, d).unwrap();
        let corner = b.corners()[0];
        let min_gap = cyl
            .vertices
            .iter()
            .map(|v| vec_dot(vec_sub(vec_add(*v, pose.center), corner), dir))
            .fold(f64::INFINITY, f64::min);
        assert!((min_gap - d).abs() < 1e-6, "gap {min_gap} vs d {d}");
    }

    #[test]
    fn placement_never_puts_vertices_inside_the_box() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let meshes = [
            init_primitive(PrimitiveShape::Cylinder),
            init_primitive(PrimitiveShape::Cube),
            init_primitive(PrimitiveShape::Sphere),
        ];
        for trial in 0..100 {
            let b = BBox3D::new(
                [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-1.0..1.0)],
                [rng.gen_range(1.0..5.0), rng.gen_range(1.0..3.0), rng.gen_range(1.0..2.5)],
                rng.gen_range(-PI..PI),
                Category::Vehicle,
            );
            let corner = rng.gen_range(0..8usize);
            let normals = corner_outward_normals(&b, corner);
            let dir = normals[rng.gen_range(0..3usize)];
            let mesh = &meshes[trial % 3];
            for &d in &[0.0, 0.1, 0.5, 1.0] {
                let pose = place(mesh, &b, corner, dir, d).unwrap();
                let inside = mesh.vertices.iter().filter(|v| b.contains(vec_add(**v, pose.center))).count();
                assert_eq!(inside, 0, "trial {trial}: {inside} vertices inside at d={d}");
            }
        }
    }

    #[test]
    fn clamp_displacement_caps_vertices_and_texture() {
        let mut m = init_primitive(PrimitiveShape::Cube);
        m.vertices[0][0] = m.base_vertices[0][0] + 0.25;
        m.vertices[5][2] = m.base_vertices[5][2] - 0.2;
        m.texture[0] = [1.3, -0.2, 0.5];
        clamp_displacement(&mut m, 0.1);
        assert!((m.vertices[0][0] - (m.base_vertices[0][0] + 0.1)).abs() < 1e-12);
        assert!((m.vertices[5][2] - (m.base_vertices[5][2] - 0.1)).abs() < 1e-12);
        assert_eq!(m.texture[0], [1.0, 0.0, 0.5]);
        // vertices within the cap stay put
        let before = m.vertices[10];
        clamp_displacement(&mut m, 0.1);
        assert_eq!(m.vertices[10], before);
    }

    #[test]
    fn obj_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.obj");
        let mut m = init_primitive(PrimitiveShape::Cube);
        m.texture[3] = [0.25, 0.5, 0.75];
        m.vertices[7][1] += 0.0421;
        save_obj(&m, &path).unwrap();
        let loaded = load_obj(&path).unwrap();
        assert_eq!(loaded.vertex_count(), m.vertex_count());
        assert_eq!(loaded.face_count(), m.face_count());
        let mut max_delta: f64 = 0.0;
        for (a, b) in loaded.vertices.iter().zip(m.vertices.iter()) {
            for k in 0..3 {
                max_delta = max_delta.max((a[k] - b[k]).abs());
            }
        }
        assert!(max_delta < 1e-6, "max vertex delta {max_delta}");
        assert_eq!(loaded.texture, m.texture);
        assert_eq!(loaded.faces, m.faces);
    }

    #[test]
    fn obj_quad_face_is_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quad.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        let err = load_obj(&path).unwrap_err().to_string();
        assert!(err.contains(":5"), "{err}");
        assert!(err.contains("triangles"), "{err}");
    }

    #[test]
    fn obj_empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.obj");
        std::fs::write(&path, "").unwrap();
        let err = load_obj(&path).unwrap_err().to_string();
        assert!(err.contains("no vertices"), "{err}");
    }
}
