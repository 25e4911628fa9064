//! Material documents: a JSON object mapping names to sparse property sets,
//! with optional single-parent `extends`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::AssetError;
use crate::shading::{ResolvedMaterial, Rgb};

pub type MaterialMap = BTreeMap<String, ResolvedMaterial>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialProps {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub albedo: Option<Rgb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roughness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflectivity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refraction_index: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transparency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emission: Option<Rgb>,
}

impl MaterialProps {
    pub fn apply_to(&self, m: &mut ResolvedMaterial) {
        if let Some(v) = self.albedo {
            m.albedo = v;
        }
        if let Some(v) = self.roughness {
            m.roughness = v;
        }
        if let Some(v) = self.reflectivity {
            m.reflectivity = v;
        }
        if let Some(v) = self.refraction_index {
            m.refraction_index = v;
        }
        if let Some(v) = self.transparency {
            m.transparency = v;
        }
        if let Some(v) = self.emission {
            m.emission = v;
        }
    }

    /// Overlays the fields set in `patch`.
    pub fn merge(&mut self, patch: &MaterialProps) {
        macro_rules! take {
            ($($f:ident),*) => { $( if patch.$f.is_some() { self.$f = patch.$f; } )* };
        }
        take!(albedo, roughness, reflectivity, refraction_index, transparency, emission);
    }

    pub fn check_ranges(&self, material: &str) -> Result<(), AssetError> {
        let range = |field: &'static str, value: String| AssetError::Range {
            material: material.to_string(),
            field,
            value,
        };
        let unit = |field: &'static str, v: Option<f64>| match v {
            Some(x) if !(0.0..=1.0).contains(&x) => Err(range(field, x.to_string())),
            _ => Ok(()),
        };
        if let Some(a) = self.albedo {
            if a.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(range("albedo", format!("{a:?}")));
            }
        }
        unit("roughness", self.roughness)?;
        unit("reflectivity", self.reflectivity)?;
        unit("transparency", self.transparency)?;
        if let Some(ior) = self.refraction_index {
            if !(ior == 0.0 || (ior >= 1.0 && ior.is_finite())) {
                return Err(range("refraction_index", ior.to_string()));
            }
        }
        if let Some(e) = self.emission {
            if e.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
                return Err(range("emission", format!("{e:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialDoc {
    pub name: String,
    pub extends: Option<String>,
    pub props: MaterialProps,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extends: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    albedo: Option<Rgb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    roughness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reflectivity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    refraction_index: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transparency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emission: Option<Rgb>,
}

impl RawDoc {
    fn from_doc(d: &MaterialDoc) -> RawDoc {
        let p = &d.props;
        RawDoc {
            extends: d.extends.clone(),
            albedo: p.albedo,
            roughness: p.roughness,
            reflectivity: p.reflectivity,
            refraction_index: p.refraction_index,
            transparency: p.transparency,
            emission: p.emission,
        }
    }

    fn props(&self) -> MaterialProps {
        MaterialProps {
            albedo: self.albedo,
            roughness: self.roughness,
            reflectivity: self.reflectivity,
            refraction_index: self.refraction_index,
            transparency: self.transparency,
            emission: self.emission,
        }
    }
}

/// Keeps entries in document order, including repeated keys.
struct OrderedEntries(Vec<(String, RawDoc)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping material names to properties")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<OrderedEntries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, RawDoc>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

pub fn parse_material_doc(text: &str) -> Result<Vec<MaterialDoc>, AssetError> {
    let entries: OrderedEntries = serde_json::from_str(text).map_err(|e| AssetError::Parse {
        what: "material JSON",
        line: Some(e.line()),
        message: e.to_string(),
    })?;
    let mut seen = HashSet::new();
    let mut docs = Vec::with_capacity(entries.0.len());
    for (name, raw) in entries.0 {
        if name.is_empty() {
            return Err(AssetError::Parse { what: "material JSON", line: None, message: "empty material name".into() });
        }
        if !seen.insert(name.clone()) {
            return Err(AssetError::DuplicateDefinition(name));
        }
        let props = raw.props();
        props.check_ranges(&name)?;
        docs.push(MaterialDoc { name, extends: raw.extends, props });
    }
    Ok(docs)
}

/// Serializes documents back to the JSON schema accepted by
/// [`parse_material_doc`], sorted by name.
pub fn material_docs_to_json(docs: &[MaterialDoc]) -> String {
    let map: BTreeMap<&str, RawDoc> = docs.iter().map(|d| (d.name.as_str(), RawDoc::from_doc(d))).collect();
    serde_json::to_string_pretty(&map).expect("material documents serialize")
}

pub fn resolve_materials(docs: &[MaterialDoc]) -> Result<MaterialMap, AssetError> {
    let mut by_name: BTreeMap<&str, &MaterialDoc> = BTreeMap::new();
    for d in docs {
        if by_name.insert(d.name.as_str(), d).is_some() {
            return Err(AssetError::DuplicateDefinition(d.name.clone()));
        }
    }
    let mut out = MaterialMap::new();
    for name in by_name.keys() {
        let mut stack = Vec::new();
        resolve_one(name, &by_name, &mut out, &mut stack)?;
    }
    Ok(out)
}

fn resolve_one<'a>(
    name: &'a str,
    docs: &BTreeMap<&'a str, &'a MaterialDoc>,
    out: &mut MaterialMap,
    stack: &mut Vec<&'a str>,
) -> Result<(), AssetError> {
    if out.contains_key(name) {
        return Ok(());
    }
    if let Some(pos) = stack.iter().position(|s| *s == name) {
        let mut cycle: Vec<String> = stack[pos..].iter().map(|s| s.to_string()).collect();
        cycle.push(name.to_string());
        return Err(AssetError::Cycle(cycle));
    }
    let doc = docs[name];
    let mut resolved = match &doc.extends {
        Some(parent) => {
            let (pname, _) = docs.get_key_value(parent.as_str()).ok_or_else(|| AssetError::UnknownParent {
                material: name.to_string(),
                parent: parent.clone(),
            })?;
            stack.push(name);
            resolve_one(pname, docs, out, stack)?;
            stack.pop();
            out[*pname].clone()
        }
        None => ResolvedMaterial::default(),
    };
    doc.props.apply_to(&mut resolved);
    resolved.name = name.to_string();
    if resolved.reflectivity + resolved.transparency > 1.0 + 1e-12 {
        return Err(AssetError::Constraint {
            material: name.to_string(),
            message: format!(
                "reflectivity {} + transparency {} exceeds 1",
                resolved.reflectivity, resolved.transparency
            ),
        });
    }
    out.insert(name.to_string(), resolved);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parses_single_doc() {
        let docs = parse_material_doc(r#"{"steel": {"albedo": [0.6,0.6,0.6], "roughness": 0.3}}"#).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].name, "steel");
        assert_eq!(docs[0].props.roughness, Some(0.3));
        assert_eq!(docs[0].extends, None);
    }

    #[test]
    fn rejects_bad_documents() {
        let dup = parse_material_doc(r#"{"steel": {}, "steel": {"roughness": 0.1}}"#);
        assert_eq!(dup, Err(AssetError::DuplicateDefinition("steel".into())));

        match parse_material_doc(r#"{"x": {"roughness": -0.1}}"#) {
            Err(AssetError::Range { field, .. }) => assert_eq!(field, "roughness"),
            other => panic!("{other:?}"),
        }
        match parse_material_doc(r#"{"x": {"roughness": 1.5}}"#) {
            Err(AssetError::Range { field, .. }) => assert_eq!(field, "roughness"),
            other => panic!("{other:?}"),
        }
        match parse_material_doc(r#"{"x": {"refraction_index": 0.5}}"#) {
            Err(AssetError::Range { field, .. }) => assert_eq!(field, "refraction_index"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_material_doc(r#"{"x": {"shininess": 2}}"#), Err(AssetError::Parse { .. })));
        match parse_material_doc("{\"x\":\n {\"roughness\": }}") {
            Err(AssetError::Parse { line, .. }) => assert_eq!(line, Some(2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn child_overrides_parent() {
        let docs = parse_material_doc(
            r#"{"child": {"extends": "parent", "roughness": 0.1},
                "parent": {"albedo": [1,0,0], "roughness": 0.5}}"#,
        )
        .unwrap();
        let m = resolve_materials(&docs).unwrap();
        assert_eq!(m["child"].albedo, [1.0, 0.0, 0.0]);
        assert_eq!(m["child"].roughness, 0.1);
        assert_eq!(m["child"].refraction_index, 1.0);
        assert_eq!(m["child"].name, "child");
    }

    #[test]
    fn resolution_errors() {
        let docs = parse_material_doc(r#"{"a": {"extends": "b"}, "b": {"extends": "a"}}"#).unwrap();
        match resolve_materials(&docs) {
            Err(AssetError::Cycle(c)) => assert_eq!(c, vec!["a", "b", "a"]),
            other => panic!("{other:?}"),
        }
        let docs = parse_material_doc(r#"{"a": {"extends": "a"}}"#).unwrap();
        assert!(matches!(resolve_materials(&docs), Err(AssetError::Cycle(_))));
        let docs = parse_material_doc(r#"{"a": {"extends": "ghost"}}"#).unwrap();
        assert!(matches!(resolve_materials(&docs), Err(AssetError::UnknownParent { .. })));
        let docs = parse_material_doc(
            r#"{"p": {"reflectivity": 0.7}, "c": {"extends": "p", "transparency": 0.5}}"#,
        )
        .unwrap();
        match resolve_materials(&docs) {
            Err(AssetError::Constraint { material, .. }) => assert_eq!(material, "c"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"glass": {"extends": "base", "transparency": 0.9, "refraction_index": 1.5},
                       "base": {"albedo": [0.1, 0.2, 0.3], "emission": [0, 0, 2]}}"#;
        let mut docs = parse_material_doc(text).unwrap();
        let mut back = parse_material_doc(&material_docs_to_json(&docs)).unwrap();
        docs.sort_by(|a, b| a.name.cmp(&b.name));
        back.sort_by(|a, b| a.name.cmp(&b.name));
        assert_eq!(docs, back);
    }

    fn random_props(rng: &mut ChaCha8Rng) -> MaterialProps {
        let mut p = MaterialProps::default();
        if rng.random_bool(0.5) {
            p.albedo = Some([rng.random(), rng.random(), rng.random()]);
        }
        if rng.random_bool(0.5) {
            p.roughness = Some(rng.random());
        }
        if rng.random_bool(0.4) {
            p.reflectivity = Some(rng.random_range(0.0..0.5));
        }
        if rng.random_bool(0.4) {
            p.transparency = Some(rng.random_range(0.0..0.5));
        }
        if rng.random_bool(0.3) {
            p.refraction_index = Some(rng.random_range(1.0..2.5));
        }
        if rng.random_bool(0.3) {
            p.emission = Some([rng.random_range(0.0..4.0), 0.0, 1.0]);
        }
        p
    }

    /// Forest where node i may only extend nodes j < i, so index order is a
    /// topological order.
    fn random_forest(rng: &mut ChaCha8Rng, n: usize) -> Vec<MaterialDoc> {
        (0..n)
            .map(|i| MaterialDoc {
                name: format!("m{i:02}"),
                extends: (i > 0 && rng.random_bool(0.7)).then(|| format!("m{:02}", rng.random_range(0..i))),
                props: random_props(rng),
            })
            .collect()
    }

    fn root_down_oracle(docs: &[MaterialDoc]) -> MaterialMap {
        let mut out = MaterialMap::new();
        for d in docs {
            let mut m = match &d.extends {
                Some(p) => out[p].clone(),
                None => ResolvedMaterial::default(),
            };
            let p = &d.props;
            m.albedo = p.albedo.unwrap_or(m.albedo);
            m.roughness = p.roughness.unwrap_or(m.roughness);
            m.reflectivity = p.reflectivity.unwrap_or(m.reflectivity);
            m.refraction_index = p.refraction_index.unwrap_or(m.refraction_index);
            m.transparency = p.transparency.unwrap_or(m.transparency);
            m.emission = p.emission.unwrap_or(m.emission);
            m.name = d.name.clone();
            out.insert(d.name.clone(), m);
        }
        out
    }

    #[test]
    fn forests_match_root_down_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let docs = random_forest(&mut rng, 50);
            let want = root_down_oracle(&docs);
            let mut shuffled = docs.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(resolve_materials(&shuffled).unwrap(), want);
        }
    }

    proptest! {
        #[test]
        fn order_independent(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let docs = random_forest(&mut rng, n);
            let base = resolve_materials(&docs).unwrap();
            let mut shuffled = docs.clone();
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(resolve_materials(&shuffled).unwrap(), base);
        }
    }
}
