//! COLLADA subset: `library_geometries` meshes made of `<triangles>` (or
//! `<polylist>` whose every `vcount` is 3) with POSITION and optional NORMAL
//! inputs, and `library_visual_scenes` node trees built from `matrix`,
//! `translate`, `rotate` and `scale` elements plus `instance_geometry`.
//!
//! Unsupported: `lines`, `linestrips`, `polygons`, `trifans`, `tristrips`,
//! non-triangular polylists, animation, controllers, effects, images,
//! cameras and lights.

use std::collections::{BTreeMap, HashMap};

use roxmltree::{Document, Node};

use super::AssetError;
use crate::accel::Mesh;
use crate::geometry::{Transform, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct AssetNode {
    pub name: String,
    pub transform: Transform,
    pub mesh: Option<String>,
    pub material: Option<String>,
    pub children: Vec<AssetNode>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneAsset {
    pub meshes: BTreeMap<String, Mesh>,
    pub nodes: Vec<AssetNode>,
}

impl SceneAsset {
    /// All mesh instances flattened into one mesh in asset space.
    pub fn flatten(&self) -> Mesh {
        let mut out = Mesh::default();
        let mut with_normals = true;
        fn walk(asset: &SceneAsset, nodes: &[AssetNode], parent: &Transform, out: &mut Mesh, with_normals: &mut bool) {
            for n in nodes {
                let world = parent.compose(&n.transform);
                if let Some(mesh) = n.mesh.as_ref().and_then(|m| asset.meshes.get(m)) {
                    let base = out.positions.len() as u32;
                    out.positions.extend(
                        mesh.positions.iter().map(|p| world.apply_point(Vec3::from_f32(*p)).to_f32()),
                    );
                    match (&mesh.normals, out.normals.as_mut()) {
                        (Some(ns), Some(dst)) if *with_normals => {
                            let inv = world.invert().unwrap_or(Transform::IDENTITY);
                            dst.extend(
                                ns.iter().map(|n| inv.apply_dir_transposed(Vec3::from_f32(*n)).normalize().to_f32()),
                            );
                        }
                        _ => *with_normals = false,
                    }
                    out.indices.extend(mesh.indices.iter().map(|t| t.map(|i| i + base)));
                }
                walk(asset, &n.children, &world, out, with_normals);
            }
        }
        out.normals = Some(Vec::new());
        walk(self, &self.nodes, &Transform::IDENTITY, &mut out, &mut with_normals);
        if !with_normals {
            out.normals = None;
        }
        out
    }

    pub fn node_count(&self) -> usize {
        fn count(nodes: &[AssetNode]) -> usize {
            nodes.iter().map(|n| 1 + count(&n.children)).sum()
        }
        count(&self.nodes)
    }
}

fn parse_err(node: Option<&Node>, doc: Option<&Document>, message: impl Into<String>) -> AssetError {
    let line = match (node, doc) {
        (Some(n), Some(d)) => Some(d.text_pos_at(n.range().start).row as usize),
        _ => None,
    };
    AssetError::Parse { what: "COLLADA", line, message: message.into() }
}

fn floats(doc: &Document, node: &Node) -> Result<Vec<f64>, AssetError> {
    node.text()
        .unwrap_or("")
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| parse_err(Some(node), Some(doc), format!("bad number {t:?}"))))
        .collect()
}

fn uints(doc: &Document, node: &Node) -> Result<Vec<usize>, AssetError> {
    node.text()
        .unwrap_or("")
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| parse_err(Some(node), Some(doc), format!("bad index {t:?}"))))
        .collect()
}

fn child<'a, 'i>(node: &Node<'a, 'i>, tag: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(tag))
}

fn children<'a, 'i>(node: &Node<'a, 'i>, tag: &'static str) -> impl Iterator<Item = Node<'a, 'i>> + use<'a, 'i> {
    node.children().filter(move |c| c.has_tag_name(tag))
}

fn strip_hash(s: &str) -> &str {
    s.strip_prefix('#').unwrap_or(s)
}

/// Axis change into right-handed Y-up.
fn up_axis_conversion(root: &Node) -> Transform {
    let up = child(root, "asset").and_then(|a| child(&a, "up_axis")).and_then(|u| u.text()).map(str::trim);
    match up {
        // (x, y, z) -> (x, z, -y)
        Some("Z_UP") => Transform::from_row_major(&[
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, -1.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ]),
        // (x, y, z) -> (-y, x, z)
        Some("X_UP") => Transform::from_row_major(&[
            0.0, -1.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ]),
        _ => Transform::IDENTITY,
    }
}

struct Source {
    data: Vec<f64>,
    stride: usize,
}

impl Source {
    fn get(&self, i: usize) -> Option<[f64; 3]> {
        let s = self.data.get(i * self.stride..i * self.stride + 3)?;
        Some([s[0], s[1], s[2]])
    }
}

fn read_sources(doc: &Document, mesh: &Node) -> Result<HashMap<String, Source>, AssetError> {
    let mut out = HashMap::new();
    for src in children(mesh, "source") {
        let Some(id) = src.attribute("id") else { continue };
        let Some(arr) = child(&src, "float_array") else { continue };
        let data = floats(doc, &arr)?;
        let stride = child(&src, "technique_common")
            .and_then(|t| child(&t, "accessor"))
            .and_then(|a| a.attribute("stride"))
            .and_then(|s| s.parse().ok())
            .unwrap_or(3);
        if stride < 3 {
            return Err(parse_err(Some(&src), Some(doc), format!("source {id:?} has stride {stride}")));
        }
        out.insert(id.to_string(), Source { data, stride });
    }
    Ok(out)
}

struct Input {
    semantic: String,
    source: String,
    offset: usize,
}

fn parse_geometry(doc: &Document, geom: &Node, axis: &Transform) -> Result<Mesh, AssetError> {
    let id = geom.attribute("id").unwrap_or("");
    let Some(mesh) = child(geom, "mesh") else {
        let tag = geom.first_element_child().map(|c| c.tag_name().name().to_string()).unwrap_or_default();
        return Err(AssetError::Unsupported(tag));
    };
    let sources = read_sources(doc, &mesh)?;
    // <vertices> redirects VERTEX inputs to their POSITION (and maybe NORMAL) sources
    let mut vertex_inputs: HashMap<String, Vec<(String, String)>> = HashMap::new();
    for v in children(&mesh, "vertices") {
        let vid = v.attribute("id").unwrap_or("").to_string();
        let list = children(&v, "input")
            .map(|i| (i.attribute("semantic").unwrap_or("").to_string(), strip_hash(i.attribute("source").unwrap_or("")).to_string()))
            .collect();
        vertex_inputs.insert(vid, list);
    }

    let mut positions: Vec<[f32; 3]> = Vec::new();
    let mut normals: Vec<[f32; 3]> = Vec::new();
    let mut has_normals = true;
    let mut indices = Vec::new();
    let mut dedup: HashMap<(usize, Option<usize>), u32> = HashMap::new();

    for prim in mesh.children().filter(|c| c.is_element()) {
        let tag = prim.tag_name().name();
        match tag {
            "source" | "vertices" | "extra" => continue,
            "triangles" => {}
            "polylist" => {
                let counts = child(&prim, "vcount").map(|v| uints(doc, &v)).transpose()?.unwrap_or_default();
                if counts.iter().any(|&c| c != 3) {
                    return Err(AssetError::Unsupported("polylist".into()));
                }
            }
            other => return Err(AssetError::Unsupported(other.to_string())),
        }
        let inputs: Vec<Input> = children(&prim, "input")
            .map(|i| Input {
                semantic: i.attribute("semantic").unwrap_or("").to_string(),
                source: strip_hash(i.attribute("source").unwrap_or("")).to_string(),
                offset: i.attribute("offset").and_then(|o| o.parse().ok()).unwrap_or(0),
            })
            .collect();
        let stride = inputs.iter().map(|i| i.offset + 1).max().unwrap_or(1);
        let mut pos_input: Option<(usize, &str)> = None;
        let mut nrm_input: Option<(usize, &str)> = None;
        for inp in &inputs {
            match inp.semantic.as_str() {
                "VERTEX" => {
                    let redirect = vertex_inputs
                        .get(&inp.source)
                        .ok_or_else(|| AssetError::UnknownReference(format!("#{}", inp.source)))?;
                    for (sem, src) in redirect {
                        match sem.as_str() {
                            "POSITION" => pos_input = Some((inp.offset, src)),
                            "NORMAL" => nrm_input = Some((inp.offset, src)),
                            _ => {}
                        }
                    }
                }
                "POSITION" => pos_input = Some((inp.offset, &inp.source)),
                "NORMAL" => nrm_input = Some((inp.offset, &inp.source)),
                _ => {}
            }
        }
        let (pos_off, pos_src) =
            pos_input.ok_or_else(|| parse_err(Some(&prim), Some(doc), format!("{tag} in {id:?} has no POSITION input")))?;
        let pos_src = sources.get(pos_src).ok_or_else(|| AssetError::UnknownReference(format!("#{pos_src}")))?;
        let nrm = match nrm_input {
            Some((off, src)) => {
                Some((off, sources.get(src).ok_or_else(|| AssetError::UnknownReference(format!("#{src}")))?))
            }
            None => None,
        };
        if nrm.is_none() {
            has_normals = false;
        }
        let p = child(&prim, "p").map(|p| uints(doc, &p)).transpose()?.unwrap_or_default();
        if p.len() % (stride * 3) != 0 {
            return Err(parse_err(Some(&prim), Some(doc), format!("{tag} index count {} is not a multiple of {}", p.len(), stride * 3)));
        }
        for tri in p.chunks(stride * 3) {
            let mut t = [0u32; 3];
            for (k, corner) in tri.chunks(stride).enumerate() {
                let pi = corner[pos_off];
                let ni = nrm.as_ref().map(|(off, _)| corner[*off]);
                let next = positions.len() as u32;
                let idx = *dedup.entry((pi, ni)).or_insert(next);
                if idx == next {
                    let pos = pos_src
                        .get(pi)
                        .ok_or_else(|| parse_err(Some(&prim), Some(doc), format!("position index {pi} out of range")))?;
                    positions.push(axis.apply_point(Vec3::new(pos[0], pos[1], pos[2])).to_f32());
                    let n = match (&nrm, ni) {
                        (Some((_, src)), Some(ni)) => src
                            .get(ni)
                            .ok_or_else(|| parse_err(Some(&prim), Some(doc), format!("normal index {ni} out of range")))?,
                        _ => [0.0, 0.0, 0.0],
                    };
                    normals.push(axis.apply_dir(Vec3::new(n[0], n[1], n[2])).to_f32());
                }
                t[k] = idx;
            }
            indices.push(t);
        }
    }
    let mut m = Mesh::new(positions, indices);
    if has_normals && !m.positions.is_empty() {
        m = m.with_normals(normals);
    }
    Ok(m)
}

fn node_transform(doc: &Document, node: &Node) -> Result<Transform, AssetError> {
    let mut t = Transform::IDENTITY;
    for el in node.children().filter(|c| c.is_element()) {
        let step = match el.tag_name().name() {
            "matrix" => {
                let v = floats(doc, &el)?;
                let arr: [f64; 16] =
                    v.try_into().map_err(|_| parse_err(Some(&el), Some(doc), "matrix needs 16 values"))?;
                Transform::from_row_major(&arr)
            }
            "translate" => match floats(doc, &el)?[..] {
                [x, y, z] => Transform::translate(Vec3::new(x, y, z)),
                _ => return Err(parse_err(Some(&el), Some(doc), "translate needs 3 values")),
            },
            "scale" => match floats(doc, &el)?[..] {
                [x, y, z] => Transform::scale(Vec3::new(x, y, z)),
                _ => return Err(parse_err(Some(&el), Some(doc), "scale needs 3 values")),
            },
            "rotate" => match floats(doc, &el)?[..] {
                [x, y, z, deg] => Transform::rotate(Vec3::new(x, y, z), deg),
                _ => return Err(parse_err(Some(&el), Some(doc), "rotate needs 4 values")),
            },
            "lookat" | "skew" => return Err(AssetError::Unsupported(el.tag_name().name().to_string())),
            _ => continue,
        };
        t = t.compose(&step);
    }
    Ok(t)
}

fn parse_node(
    doc: &Document,
    node: &Node,
    meshes: &BTreeMap<String, Mesh>,
    axis: &Transform,
    axis_inv: &Transform,
    index: usize,
) -> Result<AssetNode, AssetError> {
    let name = node
        .attribute("name")
        .or_else(|| node.attribute("id"))
        .map(str::to_string)
        .unwrap_or_else(|| format!("node{index}"));
    let local = node_transform(doc, node)?;
    let transform = axis.compose(&local).compose(axis_inv);

    let mut geoms = Vec::new();
    for ig in children(node, "instance_geometry") {
        let url = strip_hash(ig.attribute("url").unwrap_or("")).to_string();
        if !meshes.contains_key(&url) {
            return Err(AssetError::UnknownReference(format!("#{url}")));
        }
        let material = child(&ig, "bind_material")
            .and_then(|b| child(&b, "technique_common"))
            .and_then(|t| child(&t, "instance_material"))
            .and_then(|m| m.attribute("target").or_else(|| m.attribute("symbol")))
            .map(|s| strip_hash(s).to_string());
        geoms.push((url, material));
    }
    let mut kids = Vec::new();
    for (k, c) in children(node, "node").enumerate() {
        kids.push(parse_node(doc, &c, meshes, axis, axis_inv, k)?);
    }
    let mut geoms = geoms.into_iter();
    let (mesh, material) = match geoms.next() {
        Some((m, mat)) => (Some(m), mat),
        None => (None, None),
    };
    // further instance_geometry elements become identity children
    for (k, (m, mat)) in geoms.enumerate() {
        kids.push(AssetNode {
            name: format!("{name}#{}", k + 1),
            transform: Transform::IDENTITY,
            mesh: Some(m),
            material: mat,
            children: Vec::new(),
        });
    }
    Ok(AssetNode { name, transform, mesh, material, children: kids })
}

pub fn parse_collada(bytes: &[u8]) -> Result<SceneAsset, AssetError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| AssetError::Parse { what: "COLLADA", line: None, message: e.to_string() })?;
    let doc = Document::parse(text).map_err(|e| AssetError::Parse {
        what: "COLLADA",
        line: Some(e.pos().row as usize),
        message: e.to_string(),
    })?;
    let root = doc.root_element();
    if !root.has_tag_name("COLLADA") {
        return Err(parse_err(Some(&root), Some(&doc), "root element is not <COLLADA>"));
    }
    let axis = up_axis_conversion(&root);
    let axis_inv = axis.invert().expect("axis conversions are rotations");

    let mut meshes = BTreeMap::new();
    for lib in children(&root, "library_geometries") {
        for g in children(&lib, "geometry") {
            let id = g.attribute("id").ok_or_else(|| parse_err(Some(&g), Some(&doc), "geometry without id"))?;
            meshes.insert(id.to_string(), parse_geometry(&doc, &g, &axis)?);
        }
    }

    let scenes: Vec<Node> =
        children(&root, "library_visual_scenes").flat_map(|l| children(&l, "visual_scene").collect::<Vec<_>>()).collect();
    let wanted = child(&root, "scene")
        .and_then(|s| child(&s, "instance_visual_scene"))
        .and_then(|i| i.attribute("url"))
        .map(strip_hash);
    let scene = match wanted {
        Some(id) => Some(
            scenes
                .iter()
                .find(|s| s.attribute("id") == Some(id))
                .ok_or_else(|| AssetError::UnknownReference(format!("#{id}")))?,
        ),
        None => scenes.first(),
    };
    let mut nodes = Vec::new();
    if let Some(scene) = scene {
        for (k, n) in children(scene, "node").enumerate() {
            nodes.push(parse_node(&doc, &n, &meshes, &axis, &axis_inv, k)?);
        }
    }
    Ok(SceneAsset { meshes, nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;

    fn triangle_doc(up: &str, positions: &str, node_xform: &str) -> String {
        format!(
            r##"<?xml version="1.0" encoding="utf-8"?>
<COLLADA xmlns="http://www.collada.org/2005/11/COLLADASchema" version="1.4.1">
  <asset><up_axis>{up}</up_axis></asset>
  <library_geometries>
    <geometry id="tri" name="tri">
      <mesh>
        <source id="tri-pos">
          <float_array id="tri-pos-array" count="9">{positions}</float_array>
          <technique_common><accessor source="#tri-pos-array" count="3" stride="3"/></technique_common>
        </source>
        <source id="tri-nrm">
          <float_array id="tri-nrm-array" count="3">0 0 1</float_array>
          <technique_common><accessor source="#tri-nrm-array" count="1" stride="3"/></technique_common>
        </source>
        <vertices id="tri-vtx"><input semantic="POSITION" source="#tri-pos"/></vertices>
        <triangles count="1" material="mat">
          <input semantic="VERTEX" source="#tri-vtx" offset="0"/>
          <input semantic="NORMAL" source="#tri-nrm" offset="1"/>
          <p>0 0 1 0 2 0</p>
        </triangles>
      </mesh>
    </geometry>
  </library_geometries>
  <library_visual_scenes>
    <visual_scene id="scene">
      <node id="n" name="n">{node_xform}
        <instance_geometry url="#tri">
          <bind_material><technique_common>
            <instance_material symbol="mat" target="#red"/>
          </technique_common></bind_material>
        </instance_geometry>
      </node>
    </visual_scene>
  </library_visual_scenes>
  <scene><instance_visual_scene url="#scene"/></scene>
</COLLADA>"##
        )
    }

    fn bounds(m: &Mesh) -> Aabb {
        m.positions.iter().fold(Aabb::EMPTY, |b, p| b.grow(Vec3::from_f32(*p)))
    }

    #[test]
    fn minimal_triangle() {
        let asset = parse_collada(triangle_doc("Y_UP", "0 0 0 1 0 0 0 1 0", "").as_bytes()).unwrap();
        assert_eq!(asset.meshes.len(), 1);
        let m = &asset.meshes["tri"];
        assert_eq!(m.positions.len(), 3);
        assert_eq!(m.indices, vec![[0, 1, 2]]);
        assert_eq!(m.normals.as_ref().unwrap()[0], [0.0, 0.0, 1.0]);
        assert_eq!(asset.node_count(), 1);
        let n = &asset.nodes[0];
        assert_eq!(n.transform, Transform::IDENTITY);
        assert_eq!(n.mesh.as_deref(), Some("tri"));
        assert_eq!(n.material.as_deref(), Some("red"));
    }

    #[test]
    fn z_up_matches_y_up_bounds() {
        let y = parse_collada(triangle_doc("Y_UP", "0 0 0 1 0 0 0 1 0", "").as_bytes()).unwrap();
        // same triangle authored with Z up: engine (x, y, z) was stored as (x, -z, y)
        let z = parse_collada(triangle_doc("Z_UP", "0 0 0 1 0 0 0 0 1", "").as_bytes()).unwrap();
        let (by, bz) = (bounds(&y.meshes["tri"]), bounds(&z.meshes["tri"]));
        assert!((by.min - bz.min).length() < 1e-9 && (by.max - bz.max).length() < 1e-9);
    }

    #[test]
    fn z_up_node_transforms_are_conjugated() {
        // translate along authored +Z means engine +Y
        let z = parse_collada(triangle_doc("Z_UP", "0 0 0 1 0 0 0 0 1", "<translate>0 0 2</translate>").as_bytes()).unwrap();
        let flat = z.flatten();
        let b = bounds(&flat);
        assert!((b.min - Vec3::new(0.0, 2.0, 0.0)).length() < 1e-6, "{b:?}");
        assert!((b.max - Vec3::new(1.0, 3.0, 0.0)).length() < 1e-6, "{b:?}");
    }

    #[test]
    fn transforms_compose_in_document_order() {
        let xf = "<translate>1 0 0</translate><rotate>0 0 1 90</rotate><scale>2 2 2</scale>";
        let asset = parse_collada(triangle_doc("Y_UP", "0 0 0 1 0 0 0 1 0", xf).as_bytes()).unwrap();
        let want = Transform::translate(Vec3::new(1.0, 0.0, 0.0))
            .compose(&Transform::rotate(Vec3::Z, 90.0))
            .compose(&Transform::scale(Vec3::splat(2.0)));
        assert!(asset.nodes[0].transform.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn empty_visual_scene() {
        let doc = r#"<COLLADA><library_visual_scenes><visual_scene id="s"/></library_visual_scenes></COLLADA>"#;
        let asset = parse_collada(doc.as_bytes()).unwrap();
        assert_eq!(asset.node_count(), 0);
    }

    #[test]
    fn errors() {
        match parse_collada(b"<COLLADA>\n<asset>\n</COLLADA>") {
            Err(AssetError::Parse { line, .. }) => assert_eq!(line, Some(3)),
            other => panic!("{other:?}"),
        }
        let lines = triangle_doc("Y_UP", "0 0 0 1 0 0 0 1 0", "").replace("<triangles", "<lines").replace("</triangles>", "</lines>");
        assert_eq!(parse_collada(lines.as_bytes()), Err(AssetError::Unsupported("lines".into())));

        let holes = triangle_doc("Y_UP", "0 0 0 1 0 0 0 1 0", "")
            .replace("<triangles", "<polylist")
            .replace("</triangles>", "</polylist>")
            .replace("<p>", "<vcount>4</vcount><p>");
        assert_eq!(parse_collada(holes.as_bytes()), Err(AssetError::Unsupported("polylist".into())));

        let tris = triangle_doc("Y_UP", "0 0 0 1 0 0 0 1 0", "")
            .replace("<triangles", "<polylist")
            .replace("</triangles>", "</polylist>")
            .replace("<p>", "<vcount>3</vcount><p>");
        assert_eq!(parse_collada(tris.as_bytes()).unwrap().meshes["tri"].indices.len(), 1);

        let dangling = triangle_doc("Y_UP", "0 0 0 1 0 0 0 1 0", "").replace("url=\"#tri\"", "url=\"#nope\"");
        assert_eq!(parse_collada(dangling.as_bytes()), Err(AssetError::UnknownReference("#nope".into())));
    }
}
