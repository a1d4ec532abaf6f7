//! Node datasets, synthetic generators, file formats, preprocessing and
//! split management.
//!
//! Every statistic used for preprocessing (means, deviations, feature
//! rankings) is computed from training rows only.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::DgmRng;
use crate::tensor::Array;

/// Default dimension kept by [`select_features`].
pub const DEFAULT_SELECTED_FEATURES: usize = 30;
/// Default number of points per synthetic shape.
pub const DEFAULT_POINTS_PER_SHAPE: usize = 2048;

/// Boolean membership vectors over the nodes of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
    pub unseen: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
            unseen: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    fn all(&self) -> [&Vec<bool>; 4] {
        [&self.train, &self.val, &self.test, &self.unseen]
    }

    /// Fails if any node belongs to more than one mask.
    pub fn check_disjoint(&self) -> Result<()> {
        let n = self.len();
        if self.all().iter().any(|m| m.len() != n) {
            return Err(Error::Data("masks have different lengths".into()));
        }
        for i in 0..n {
            if self.all().iter().filter(|m| m[i]).count() > 1 {
                return Err(Error::Data(format!("node {i} belongs to more than one split")));
            }
        }
        Ok(())
    }

    pub fn count(mask: &[bool]) -> usize {
        mask.iter().filter(|&&m| m).count()
    }

    fn select(&self, idx: &[usize]) -> Self {
        let pick = |m: &Vec<bool>| idx.iter().map(|&i| m[i]).collect();
        Self {
            train: pick(&self.train),
            val: pick(&self.val),
            test: pick(&self.test),
            unseen: pick(&self.unseen),
        }
    }
}

/// Which feature set feeds a branch of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    M1,
    M2,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDataset {
    pub modality1: Array,
    pub modality2: Option<Array>,
    pub labels: Vec<usize>,
    pub masks: Masks,
    pub class_count: usize,
    pub standardized: bool,
    /// Columns kept by feature selection, per modality.
    pub selected: [Option<Vec<usize>>; 2],
    /// Generating group of each node for synthetic data; nodes sharing a
    /// group are linked in the ground-truth latent graph.
    pub latent_groups: Option<Vec<usize>>,
}

impl NodeDataset {
    pub fn new(modality1: Array, modality2: Option<Array>, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        if modality1.rows() != n || modality1.shape().len() != 2 {
            return Err(Error::shape("NodeDataset", modality1.shape(), &[n]));
        }
        if let Some(m2) = &modality2 {
            if m2.rows() != n || m2.shape().len() != 2 {
                return Err(Error::shape("NodeDataset", m2.shape(), &[n]));
            }
        }
        let class_count = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            modality1,
            modality2,
            labels,
            masks: Masks::empty(n),
            class_count,
            standardized: false,
            selected: [None, None],
            latent_groups: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn with_masks(mut self, masks: Masks) -> Result<Self> {
        if masks.len() != self.num_nodes() {
            return Err(Error::Data("mask length differs from node count".into()));
        }
        masks.check_disjoint()?;
        self.masks = masks;
        Ok(self)
    }

    /// Feature matrix for the requested modality selection.
    pub fn features(&self, which: Modality) -> Result<Array> {
        let m2 = || {
            self.modality2
                .as_ref()
                .ok_or_else(|| Error::Config("dataset has no second modality".into()))
        };
        match which {
            Modality::M1 => Ok(self.modality1.clone()),
            Modality::M2 => Ok(m2()?.clone()),
            Modality::Both => self.modality1.hcat(m2()?),
        }
    }

    /// Rows `idx`, in order, with masks and labels carried along.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            modality1: self.modality1.select_rows(idx),
            modality2: self.modality2.as_ref().map(|m| m.select_rows(idx)),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            masks: self.masks.select(idx),
            class_count: self.class_count,
            standardized: self.standardized,
            selected: self.selected.clone(),
            latent_groups: self.latent_groups.as_ref().map(|g| idx.iter().map(|&i| g[i]).collect()),
        }
    }

    /// Indices of nodes that are not in the unseen mask.
    pub fn seen_indices(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&i| !self.masks.unseen[i]).collect()
    }
}

/// Parameters of [`synth_clusters`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub n: usize,
    pub classes: usize,
    pub d_node: usize,
    pub d_graph: usize,
    /// Distance between class centres in the graph modality.
    pub separation: f64,
    /// Standard deviation of the graph-modality scatter around the centres.
    pub noise: f64,
    /// Fraction of `separation` carried by the node modality, whose own
    /// scatter has unit variance.
    pub node_signal: f64,
    pub seed: u64,
}

impl ClusterSpec {
    pub fn new(n: usize, classes: usize, d_node: usize, d_graph: usize, separation: f64, noise: f64, seed: u64) -> Self {
        Self {
            n,
            classes,
            d_node,
            d_graph,
            separation,
            noise,
            node_signal: 0.25,
            seed,
        }
    }
}

fn class_centres(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut v = vec![0.0; dim];
            if dim >= classes {
                v[c] = separation / 2f64.sqrt();
            } else if dim >= 2 {
                let radius = if classes == 1 { 0.0 } else { separation / (2.0 * (PI / classes as f64).sin()) };
                let a = 2.0 * PI * c as f64 / classes as f64;
                v[0] = radius * a.cos();
                v[1] = radius * a.sin();
            } else {
                v[0] = separation * c as f64;
            }
            v
        })
        .collect()
}

/// Synthetic two-modality node set with known latent structure. Modality 2
/// (the graph modality) holds tight clusters whose centres are `separation`
/// apart; modality 1 carries a weaker copy of the class signal under unit
/// noise.
pub fn synth_clusters(spec: &ClusterSpec) -> Result<NodeDataset> {
    if spec.classes < 1 || spec.d_node < 1 || spec.d_graph < 1 {
        return Err(Error::Config("classes and modality widths must be positive".into()));
    }
    if spec.n < spec.classes * 4 {
        return Err(Error::Config(format!(
            "need at least {} nodes for {} classes",
            spec.classes * 4,
            spec.classes
        )));
    }
    let mut rng = DgmRng::new(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);

    let graph_centres = class_centres(spec.classes, spec.d_graph, spec.separation);
    let node_centres = class_centres(spec.classes, spec.d_node, spec.separation * spec.node_signal);
    let mut m1 = Vec::with_capacity(spec.n * spec.d_node);
    let mut m2 = Vec::with_capacity(spec.n * spec.d_graph);
    for &c in &labels {
        for v in &node_centres[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            m1.push(v + z);
        }
        for v in &graph_centres[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            m2.push(v + spec.noise * z);
        }
    }
    let mut ds = NodeDataset::new(
        Array::new(vec![spec.n, spec.d_node], m1)?,
        Some(Array::new(vec![spec.n, spec.d_graph], m2)?),
        labels.clone(),
    )?;
    ds.class_count = spec.classes;
    ds.latent_groups = Some(labels);
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub parts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub name: String,
    pub category: usize,
    /// `P × 3` coordinates.
    pub points: Array,
    pub parts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloudSet {
    pub categories: Vec<Category>,
    pub shapes: Vec<Shape>,
}

impl PointCloudSet {
    /// Total number of distinct part labels.
    pub fn part_count(&self) -> usize {
        self.categories
            .iter()
            .flat_map(|c| c.parts.iter())
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn part_set(&self, shape: &Shape) -> &[usize] {
        &self.categories[shape.category].parts
    }
}

fn sample_cylinder(rng: &mut DgmRng, radius: f64, z0: f64, z1: f64) -> [f64; 3] {
    let a = 2.0 * PI * rng.uniform();
    let z = z0 + (z1 - z0) * rng.uniform();
    [radius * a.cos(), radius * a.sin(), z]
}

fn sample_disk(rng: &mut DgmRng, radius: f64, z: f64, thickness: f64) -> [f64; 3] {
    let a = 2.0 * PI * rng.uniform();
    let r = radius * rng.uniform().sqrt();
    [r * a.cos(), r * a.sin(), z + thickness * (rng.uniform() - 0.5)]
}

/// Composite two-primitive shapes with part labels taken from the generating
/// primitive. Even-indexed shapes are "lamp" (stem cylinder 0, shade disk 1),
/// odd-indexed ones "table" (top disk 2, leg cylinder 3). Each shape gets a
/// random size, rotation about the vertical axis and offset.
pub fn synth_shapes(count: usize, points_per_shape: usize, seed: u64) -> PointCloudSet {
    let categories = vec![
        Category {
            name: "lamp".into(),
            parts: vec![0, 1],
        },
        Category {
            name: "table".into(),
            parts: vec![2, 3],
        },
    ];
    let root = DgmRng::new(seed);
    let mut shapes = Vec::with_capacity(count);
    for s in 0..count {
        let mut rng = root.split(s as u64);
        let category = s % 2;
        let rot = 2.0 * PI * rng.uniform();
        let shift = [0.2 * (rng.uniform() - 0.5), 0.2 * (rng.uniform() - 0.5), 0.1 * (rng.uniform() - 0.5)];
        let mut data = Vec::with_capacity(points_per_shape * 3);
        let mut parts = Vec::with_capacity(points_per_shape);
        let (h, r_small, r_big) = (
            0.8 + 0.4 * rng.uniform(),
            0.08 + 0.04 * rng.uniform(),
            0.4 + 0.3 * rng.uniform(),
        );
        for p in 0..points_per_shape {
            let first = p < points_per_shape / 2;
            let (pt, part) = match (category, first) {
                (0, true) => (sample_cylinder(&mut rng, r_small, 0.0, h), 0),
                (0, false) => (sample_disk(&mut rng, r_big, h, 0.04), 1),
                (_, true) => (sample_disk(&mut rng, r_big + 0.2, h, 0.04), 2),
                (_, false) => (sample_cylinder(&mut rng, r_small, 0.0, h), 3),
            };
            let (c, sn) = (rot.cos(), rot.sin());
            data.extend_from_slice(&[
                c * pt[0] - sn * pt[1] + shift[0],
                sn * pt[0] + c * pt[1] + shift[1],
                pt[2] + shift[2],
            ]);
            parts.push(part);
        }
        shapes.push(Shape {
            name: format!("{}_{s:04}", categories[category].name),
            category,
            points: Array::new(vec![points_per_shape, 3], data).expect("shape dims"),
            parts,
        });
    }
    PointCloudSet { categories, shapes }
}

/// Writes one shape as whitespace-separated `x y z part` lines.
pub fn write_shape(path: &Path, shape: &Shape) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (i, part) in shape.parts.iter().enumerate() {
        let p = shape.points.row(i);
        writeln!(f, "{} {} {} {}", p[0], p[1], p[2], part)?;
    }
    f.flush()?;
    Ok(())
}

/// Loads every file in `dir` as one shape; the category is the file-name
/// prefix before the first `_`. Files are read in name order.
pub fn load_point_clouds(dir: &Path) -> Result<PointCloudSet> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut names: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut raw = Vec::new();
    for path in files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("bad file name {}", path.display())))?
            .to_string();
        let category = stem.split('_').next().unwrap_or(&stem).to_string();
        let mut data = Vec::new();
        let mut parts = Vec::new();
        for (ln, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 4 {
                return Err(Error::Data(format!("{}:{}: expected 4 fields", path.display(), ln + 1)));
            }
            for f in &fields[..3] {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::Data(format!("{}:{}: bad coordinate {f:?}", path.display(), ln + 1)))?;
                data.push(v);
            }
            let part: usize = fields[3]
                .parse()
                .map_err(|_| Error::Data(format!("{}:{}: bad part label {:?}", path.display(), ln + 1, fields[3])))?;
            parts.push(part);
        }
        let entry = names.entry(category.clone()).or_default();
        for &p in &parts {
            if !entry.contains(&p) {
                entry.push(p);
            }
        }
        raw.push((stem, category, data, parts));
    }
    let categories: Vec<Category> = names
        .into_iter()
        .map(|(name, mut parts)| {
            parts.sort_unstable();
            Category { name, parts }
        })
        .collect();
    let shapes = raw
        .into_iter()
        .map(|(name, cat, data, parts)| {
            let category = categories.iter().position(|c| c.name == cat).expect("category registered");
            let n = parts.len();
            Ok(Shape {
                name,
                category,
                points: Array::new(vec![n, 3], data)?,
                parts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PointCloudSet { categories, shapes })
}

/// Column layout of a tabular dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub label: String,
    pub modality1: Vec<String>,
    pub modality2: Vec<String>,
}

impl TabularSchema {
    /// Parses `key=value` lines (`label`, `modality1`, `modality2`; column
    /// lists comma-separated). Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut label = None;
        let mut m1 = None;
        let mut m2 = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("schema line {}: expected key=value", ln + 1)))?;
            let cols = || -> Vec<String> {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            };
            match k.trim() {
                "label" => label = Some(v.trim().to_string()),
                "modality1" => m1 = Some(cols()),
                "modality2" => m2 = cols(),
                other => return Err(Error::Config(format!("schema line {}: unknown key {other:?}", ln + 1))),
            }
        }
        let label = label.ok_or_else(|| Error::Config("schema has no label column".into()))?;
        let modality1 = m1
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Config("schema has no modality1 columns".into()))?;
        Ok(Self {
            label,
            modality1,
            modality2: m2,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("label={}\nmodality1={}\n", self.label, self.modality1.join(","));
        if !self.modality2.is_empty() {
            s.push_str(&format!("modality2={}\n", self.modality2.join(",")));
        }
        s
    }

    /// Layout implied by a CSV header: a `label` column plus every `m1_*`
    /// and `m2_*` column, in file order.
    pub fn from_header(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?;
        let with_prefix = |prefix: &str| -> Vec<String> {
            headers
                .iter()
                .map(str::trim)
                .filter(|h| h.starts_with(prefix))
                .map(str::to_string)
                .collect()
        };
        Self::parse(&format!(
            "label=label\nmodality1={}\nmodality2={}\n",
            with_prefix("m1_").join(","),
            with_prefix("m2_").join(",")
        ))
    }

    /// Default column names `m1_0.., m2_0..` for a dataset.
    pub fn for_dataset(ds: &NodeDataset) -> Self {
        Self {
            label: "label".into(),
            modality1: (0..ds.modality1.cols()).map(|i| format!("m1_{i}")).collect(),
            modality2: ds
                .modality2
                .as_ref()
                .map(|m| (0..m.cols()).map(|i| format!("m2_{i}")).collect())
                .unwrap_or_default(),
        }
    }
}

/// Reads a CSV file with a header row. Cells that are not finite numbers
/// and labels that are not non-negative integers are rejected with their
/// line and column.
pub fn load_tabular(path: &Path, schema: &TabularSchema) -> Result<NodeDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("column {name:?} not found in {}", path.display())))
    };
    let label_col = find(&schema.label)?;
    let m1_cols = schema.modality1.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let m2_cols = schema.modality2.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut labels = Vec::new();
    let mut m1 = Vec::new();
    let mut m2 = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |c: usize| record.get(c).unwrap_or("").trim();
        let label_text = cell(label_col);
        let label: usize = label_text.parse().map_err(|_| {
            Error::Data(format!(
                "line {line}, column {:?}: label {label_text:?} is not a non-negative integer",
                schema.label
            ))
        })?;
        labels.push(label);
        for (cols, names, out) in [(&m1_cols, &schema.modality1, &mut m1), (&m2_cols, &schema.modality2, &mut m2)] {
            for (&c, name) in cols.iter().zip(names) {
                let text = cell(c);
                let v: f64 = text
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| Error::Data(format!("line {line}, column {name:?}: {text:?} is not a finite number")))?;
                out.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    let n = labels.len();
    let m1 = Array::new(vec![n, schema.modality1.len()], m1)?;
    let m2 = if schema.modality2.is_empty() {
        None
    } else {
        Some(Array::new(vec![n, schema.modality2.len()], m2)?)
    };
    NodeDataset::new(m1, m2, labels)
}

/// Writes the dataset under `schema`'s column names; floats use the
/// shortest round-trip representation.
pub fn write_tabular(ds: &NodeDataset, path: &Path, schema: &TabularSchema) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![schema.label.clone()];
    header.extend(schema.modality1.iter().cloned());
    header.extend(schema.modality2.iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.num_nodes() {
        let mut row = vec![ds.labels[i].to_string()];
        row.extend(ds.modality1.row(i).iter().map(|v| v.to_string()));
        if let Some(m2) = &ds.modality2 {
            row.extend(m2.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column mean and (population) standard deviation over selected rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub fn fit(x: &Array, rows: &[bool]) -> Result<Self> {
        let d = x.cols();
        let idx: Vec<usize> = (0..x.rows()).filter(|&i| rows[i]).collect();
        if idx.is_empty() {
            return Err(Error::Empty("column statistics rows"));
        }
        let m = idx.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &idx {
            for (c, v) in x.row(i).iter().enumerate() {
                mean[c] += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; d];
        for &i in &idx {
            for (c, v) in x.row(i).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / m).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// `(x − μ) / σ`; columns with `σ = 0` become 0.
    pub fn apply(&self, x: &Array) -> Array {
        let d = x.cols();
        let mut out = x.clone();
        for (e, v) in out.data_mut().iter_mut().enumerate() {
            let c = e % d;
            *v = if self.std[c] > 0.0 { (*v - self.mean[c]) / self.std[c] } else { 0.0 };
        }
        out
    }
}

/// Standardises every feature with statistics from the training rows.
pub fn standardize(ds: &NodeDataset) -> Result<NodeDataset> {
    let train = &ds.masks.train;
    let mut out = ds.clone();
    out.modality1 = ColumnStats::fit(&ds.modality1, train)?.apply(&ds.modality1);
    if let Some(m2) = &ds.modality2 {
        out.modality2 = Some(ColumnStats::fit(m2, train)?.apply(m2));
    }
    out.standardized = true;
    Ok(out)
}

const RIDGE_ALPHA: f64 = 1.0;

/// Ridge classifier weights (`d × classes`, one-vs-rest ±1 targets) fitted on
/// the given rows after centring and scaling each column.
pub fn ridge_weights(x: &Array, labels: &[usize], rows: &[bool], classes: usize) -> Result<Array> {
    let idx: Vec<usize> = (0..x.rows()).filter(|&i| rows[i]).collect();
    let stats = ColumnStats::fit(x, rows)?;
    let z = stats.apply(&x.select_rows(&idx));
    let d = x.cols();
    let xm = DMatrix::from_row_slice(idx.len(), d, z.data());
    let mut y = DMatrix::from_element(idx.len(), classes, -1.0);
    for (r, &i) in idx.iter().enumerate() {
        y[(r, labels[i])] = 1.0;
    }
    let gram = xm.transpose() * &xm + DMatrix::identity(d, d) * RIDGE_ALPHA;
    let rhs = xm.transpose() * y;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric("ridge system is not positive definite".into()))?
        .solve(&rhs);
    let mut data = Vec::with_capacity(d * classes);
    for r in 0..d {
        for c in 0..classes {
            data.push(w[(r, c)]);
        }
    }
    Array::new(vec![d, classes], data)
}

/// Predictions of a ridge classifier fitted on `fit_rows`, with an intercept
/// given by the training-row class balance.
pub fn ridge_predict(x: &Array, labels: &[usize], fit_rows: &[bool], classes: usize) -> Result<Vec<usize>> {
    let w = ridge_weights(x, labels, fit_rows, classes)?;
    let stats = ColumnStats::fit(x, fit_rows)?;
    let z = stats.apply(x);
    let m = Masks::count(fit_rows) as f64;
    let bias: Vec<f64> = (0..classes)
        .map(|c| {
            let pos = (0..labels.len()).filter(|&i| fit_rows[i] && labels[i] == c).count() as f64;
            (2.0 * pos - m) / m
        })
        .collect();
    Ok((0..x.rows())
        .map(|i| {
            let row = z.row(i);
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..classes {
                let s: f64 = bias[c] + row.iter().enumerate().map(|(f, v)| v * w.get(f, c)).sum::<f64>();
                if s > best.0 {
                    best = (s, c);
                }
            }
            best.1
        })
        .collect())
}

fn eliminate(x: &Array, labels: &[usize], rows: &[bool], classes: usize, target: usize) -> Result<Vec<usize>> {
    let mut keep: Vec<usize> = (0..x.cols()).collect();
    while keep.len() > target {
        let sub = x.select_cols(&keep);
        let w = ridge_weights(&sub, labels, rows, classes)?;
        let mut importance: Vec<(f64, usize)> = (0..keep.len())
            .map(|f| ((0..classes).map(|c| w.get(f, c).abs()).sum(), f))
            .collect();
        importance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let excess = keep.len() - target;
        let step = if keep.len() > 50 { (keep.len() / 10).max(1) } else { 1 };
        let drop: Vec<usize> = importance.iter().take(step.min(excess)).map(|&(_, f)| f).collect();
        keep = keep
            .iter()
            .enumerate()
            .filter(|(f, _)| !drop.contains(f))
            .map(|(_, &c)| c)
            .collect();
    }
    Ok(keep)
}

/// Recursive feature elimination: repeatedly fits a ridge classifier on the
/// training rows and drops the columns with the smallest summed absolute
/// weight, until `target_dim` columns remain in each modality.
pub fn select_features(ds: &NodeDataset, target_dim: usize) -> Result<NodeDataset> {
    if target_dim == 0 {
        return Err(Error::Config("target dimension must be positive".into()));
    }
    let rows = &ds.masks.train;
    let classes = ds.class_count.max(1);
    let mut out = ds.clone();
    let pick = |x: &Array| -> Result<Vec<usize>> {
        if target_dim >= x.cols() {
            return Ok((0..x.cols()).collect());
        }
        eliminate(x, &ds.labels, rows, classes, target_dim)
    };
    let keep1 = pick(&ds.modality1)?;
    out.modality1 = ds.modality1.select_cols(&keep1);
    out.selected[0] = Some(keep1);
    if let Some(m2) = &ds.modality2 {
        let keep2 = pick(m2)?;
        out.modality2 = Some(m2.select_cols(&keep2));
        out.selected[1] = Some(keep2);
    }
    Ok(out)
}

/// How nodes are divided between splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitScheme {
    /// 90% train, 10% test.
    Transductive,
    /// 80% train, 10% validation, 10% unseen.
    Inductive,
    KFold { folds: usize },
}

fn largest_remainder(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n.max(1) as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if counts[c] < sizes[c] {
            counts[c] += 1;
            left -= 1;
        }
    }
    counts
}

fn shuffled_members(labels: &[usize], classes: usize, rng: &mut DgmRng) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for m in &mut members {
        rng.shuffle(m);
    }
    members
}

/// Stratified random masks. Transductive and inductive schemes return one
/// mask set; k-fold returns one per fold, with the fold as test set and the
/// rest as training. Classes smaller than the fold count fall back to an
/// unstratified assignment.
pub fn make_splits(ds: &NodeDataset, scheme: SplitScheme, seed: u64) -> Result<Vec<Masks>> {
    let n = ds.num_nodes();
    let classes = ds.class_count.max(1);
    let mut rng = DgmRng::new(seed);
    let mut members = shuffled_members(&ds.labels, classes, &mut rng);
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let round = |f: f64| (f * n as f64).round() as usize;
    match scheme {
        SplitScheme::Transductive | SplitScheme::Inductive => {
            let mut masks = Masks::empty(n);
            let carve = |fraction: f64, mask: &mut Vec<bool>, members: &mut Vec<Vec<usize>>| {
                let per_class = largest_remainder(&sizes, round(fraction));
                for (c, take) in per_class.into_iter().enumerate() {
                    let take = take.min(members[c].len());
                    for i in members[c].drain(..take) {
                        mask[i] = true;
                    }
                }
            };
            if scheme == SplitScheme::Transductive {
                carve(0.1, &mut masks.test, &mut members);
            } else {
                carve(0.1, &mut masks.unseen, &mut members);
                carve(0.1, &mut masks.val, &mut members);
            }
            for m in members.iter().flatten() {
                masks.train[*m] = true;
            }
            Ok(vec![masks])
        }
        SplitScheme::KFold { folds } => {
            if folds < 2 {
                return Err(Error::Config("k-fold needs at least 2 folds".into()));
            }
            if folds > n {
                return Err(Error::Config(format!("{folds} folds for {n} nodes")));
            }
            let order: Vec<usize> = if sizes.iter().any(|&s| s > 0 && s < folds) {
                log::warn!("a class has fewer than {folds} members; using unstratified folds");
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all
            } else {
                members.into_iter().flatten().collect()
            };
            let mut fold_of = vec![0; n];
            for (pos, &i) in order.iter().enumerate() {
                fold_of[i] = pos % folds;
            }
            Ok((0..folds)
                .map(|f| {
                    let mut m = Masks::empty(n);
                    for i in 0..n {
                        if fold_of[i] == f {
                            m.test[i] = true;
                        } else {
                            m.train[i] = true;
                        }
                    }
                    m
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{accuracy, mean_iou};

    fn clusters(n: usize, classes: usize, sep: f64, noise: f64, seed: u64) -> NodeDataset {
        synth_clusters(&ClusterSpec::new(n, classes, 4, 3, sep, noise, seed)).unwrap()
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(clusters(60, 3, 5.0, 0.5, 4), clusters(60, 3, 5.0, 0.5, 4));
        assert_ne!(clusters(60, 3, 5.0, 0.5, 4), clusters(60, 3, 5.0, 0.5, 5));
        assert!(synth_clusters(&ClusterSpec::new(8, 3, 2, 2, 1.0, 1.0, 0)).is_err());
    }

    #[test]
    fn well_separated_clusters_are_linearly_separable() {
        let ds = clusters(300, 3, 10.0, 0.1, 11);
        let masks = make_splits(&ds, SplitScheme::Transductive, 1).unwrap().remove(0);
        let x = ds.modality2.as_ref().unwrap();
        let pred = ridge_predict(x, &ds.labels, &masks.train, 3).unwrap();
        assert!(accuracy(&pred, &ds.labels, &masks.test).unwrap() >= 0.95);
    }

    #[test]
    fn zero_separation_is_uninformative() {
        let mut total = 0.0;
        for seed in 0..10 {
            let ds = clusters(300, 3, 0.0, 1.0, seed);
            let masks = make_splits(&ds, SplitScheme::Transductive, seed).unwrap().remove(0);
            let both = ds.features(Modality::Both).unwrap();
            let pred = ridge_predict(&both, &ds.labels, &masks.train, 3).unwrap();
            total += accuracy(&pred, &ds.labels, &masks.test).unwrap();
        }
        let mean = total / 10.0;
        assert!((mean - 1.0 / 3.0).abs() < 0.1, "mean accuracy {mean}");
    }

    #[test]
    fn split_sizes() {
        let ds = clusters(100, 3, 1.0, 1.0, 0);
        let t = &make_splits(&ds, SplitScheme::Transductive, 3).unwrap()[0];
        assert_eq!((Masks::count(&t.train), Masks::count(&t.test)), (90, 10));
        let i = &make_splits(&ds, SplitScheme::Inductive, 3).unwrap()[0];
        assert_eq!(
            (Masks::count(&i.train), Masks::count(&i.val), Masks::count(&i.unseen)),
            (80, 10, 10)
        );
        for m in [t, i] {
            m.check_disjoint().unwrap();
            assert!((0..100).all(|k| m.train[k] || m.val[k] || m.test[k] || m.unseen[k]));
        }
    }

    #[test]
    fn splits_are_stratified() {
        let ds = clusters(157, 4, 1.0, 1.0, 2);
        for scheme in [SplitScheme::Transductive, SplitScheme::Inductive, SplitScheme::KFold { folds: 10 }] {
            for m in make_splits(&ds, scheme, 9).unwrap() {
                for mask in [&m.train, &m.val, &m.test, &m.unseen] {
                    let size = Masks::count(mask) as f64;
                    for c in 0..4 {
                        let class_n = ds.labels.iter().filter(|&&l| l == c).count() as f64;
                        let got = (0..157).filter(|&i| mask[i] && ds.labels[i] == c).count() as f64;
                        let expect = size * class_n / 157.0;
                        assert!((got - expect).abs() <= 1.0 + 1e-9, "{scheme:?} class {c}: {got} vs {expect}");
                    }
                }
            }
        }
    }

    #[test]
    fn kfold_partitions_nodes() {
        let ds = clusters(53, 3, 1.0, 1.0, 0);
        let folds = make_splits(&ds, SplitScheme::KFold { folds: 10 }, 1).unwrap();
        let mut seen = vec![0; 53];
        for f in &folds {
            f.check_disjoint().unwrap();
            for i in 0..53 {
                seen[i] += usize::from(f.test[i]);
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert!(make_splits(&ds, SplitScheme::KFold { folds: 1 }, 1).is_err());
    }

    #[test]
    fn small_class_downgrades_to_unstratified() {
        let labels: Vec<usize> = (0..30).map(|i| usize::from(i < 3)).collect();
        let ds = NodeDataset::new(Array::zeros(vec![30, 1]), None, labels).unwrap();
        let folds = make_splits(&ds, SplitScheme::KFold { folds: 5 }, 0).unwrap();
        assert_eq!(folds.len(), 5);
        assert!(folds.iter().all(|f| Masks::count(&f.test) == 6));
    }

    #[test]
    fn standardize_uses_training_rows() {
        let mut ds = clusters(60, 3, 4.0, 1.0, 5);
        let mut m1 = ds.modality1.clone();
        for i in 0..60 {
            m1.data_mut()[i * 4 + 3] = 7.0;
        }
        ds.modality1 = m1;
        let ds = ds
            .clone()
            .with_masks(make_splits(&ds, SplitScheme::Transductive, 0).unwrap().remove(0))
            .unwrap();
        let z = standardize(&ds).unwrap();
        let stats = ColumnStats::fit(&z.modality1, &z.masks.train).unwrap();
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 1e-9);
            assert!((stats.std[c] - 1.0).abs() < 1e-9);
        }
        assert!(z.modality1.data().iter().skip(3).step_by(4).all(|&v| v == 0.0));
        // test rows are mapped with the training statistics
        let raw = ColumnStats::fit(&ds.modality1, &ds.masks.train).unwrap();
        let i = (0..60).find(|&i| ds.masks.test[i]).unwrap();
        let expect = (ds.modality1.get(i, 0) - raw.mean[0]) / raw.std[0];
        assert_eq!(z.modality1.get(i, 0), expect);
    }

    #[test]
    fn feature_selection_identity_and_errors() {
        let ds = clusters(60, 3, 4.0, 1.0, 5);
        let ds = ds
            .clone()
            .with_masks(make_splits(&ds, SplitScheme::Transductive, 0).unwrap().remove(0))
            .unwrap();
        let same = select_features(&ds, 4).unwrap();
        assert_eq!(same.modality1, ds.modality1);
        assert_eq!(same.selected[0], Some(vec![0, 1, 2, 3]));
        assert!(select_features(&ds, 0).is_err());
    }

    #[test]
    fn feature_selection_finds_informative_columns() {
        let mut hits = 0;
        for seed in 0..20 {
            let mut rng = DgmRng::new(100 + seed);
            let n = 200;
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let mut data = Vec::new();
            for &l in &labels {
                for f in 0..30 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(if f < 2 { 5.0 * l as f64 + z } else { z });
                }
            }
            let ds = NodeDataset::new(Array::new(vec![n, 30], data).unwrap(), None, labels).unwrap();
            let ds = ds
                .clone()
                .with_masks(make_splits(&ds, SplitScheme::Transductive, seed).unwrap().remove(0))
                .unwrap();
            let sel = select_features(&ds, 2).unwrap();
            if sel.selected[0] == Some(vec![0, 1]) {
                hits += 1;
            }
        }
        assert!(hits >= 19, "{hits}/20");
    }

    #[test]
    fn tabular_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = clusters(12, 3, 2.0, 0.5, 8);
        let schema = TabularSchema::for_dataset(&ds);
        let path = dir.path().join("d.csv");
        write_tabular(&ds, &path, &schema).unwrap();
        let back = load_tabular(&path, &schema).unwrap();
        assert_eq!(back.modality1, ds.modality1);
        assert_eq!(back.modality2, ds.modality2);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(TabularSchema::parse(&schema.to_text()).unwrap(), schema);
        assert_eq!(TabularSchema::from_header(&path).unwrap(), schema);

        let toy = dir.path().join("toy.csv");
        fs::write(&toy, "id,y,a,b\n0,1,0.5,2\n1,0,-1.5,3\n2,2,4,0.25\n").unwrap();
        let s = TabularSchema::parse("label=y\nmodality1=a\nmodality2=b\n").unwrap();
        let t = load_tabular(&toy, &s).unwrap();
        assert_eq!(t.num_nodes(), 3);
        assert_eq!(t.labels, vec![1, 0, 2]);
        assert_eq!(t.modality1.data(), &[0.5, -1.5, 4.0]);
        assert_eq!(t.modality2.unwrap().data(), &[2.0, 3.0, 0.25]);

        fs::write(&toy, "y,a,b\n1,0.5,2\n0,NaN,3\n").unwrap();
        let err = load_tabular(&toy, &s).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("\"a\""), "{err}");

        fs::write(&toy, "y,a,b\n1.5,0.5,2\n").unwrap();
        assert!(load_tabular(&toy, &s).unwrap_err().to_string().contains("label"));
        fs::write(&toy, "y,a,b\n").unwrap();
        assert!(load_tabular(&toy, &s).is_err());
        fs::write(&toy, "y,a\n1,2\n").unwrap();
        assert!(load_tabular(&toy, &s).unwrap_err().to_string().contains("\"b\""));
        assert!(TabularSchema::parse("modality1=a").is_err());
    }

    #[test]
    fn shapes_are_deterministic_and_labelled() {
        let a = synth_shapes(4, 64, 3);
        assert_eq!(a, synth_shapes(4, 64, 3));
        assert_eq!(a.shapes[0].points.shape(), &[64, 3]);
        for s in &a.shapes {
            assert!(s.parts.iter().all(|p| a.part_set(s).contains(p)));
        }
        assert_eq!(a.part_count(), 4);
        assert_eq!(synth_shapes(1, DEFAULT_POINTS_PER_SHAPE, 0).shapes[0].points.rows(), 2048);
    }

    #[test]
    fn point_cloud_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_shapes(4, 16, 1);
        for s in &set.shapes {
            write_shape(&dir.path().join(format!("{}.pts", s.name)), s).unwrap();
        }
        let back = load_point_clouds(dir.path()).unwrap();
        assert_eq!(back.categories, set.categories);
        let mut expected = set.shapes.clone();
        expected.sort_by(|a, b| a.name.cmp(&b.name));
        assert_eq!(back.shapes, expected);
    }

    #[test]
    fn separated_spheres_nearest_centroid_iou_is_one() {
        let mut rng = DgmRng::new(0);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let sphere = i % 2;
            let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            pts.push([v[0] / norm + 10.0 * sphere as f64, v[1] / norm, v[2] / norm]);
            truth.push(sphere);
        }
        let centroid = |s: usize| {
            let members: Vec<_> = pts.iter().zip(&truth).filter(|(_, &t)| t == s).map(|(p, _)| p).collect();
            let m = members.len() as f64;
            [0, 1, 2].map(|c| members.iter().map(|p| p[c]).sum::<f64>() / m)
        };
        let cs = [centroid(0), centroid(1)];
        let pred: Vec<usize> = pts
            .iter()
            .map(|p| {
                let d = |c: &[f64; 3]| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
                usize::from(d(&cs[1]) < d(&cs[0]))
            })
            .collect();
        assert_eq!(mean_iou(&[pred], &[truth], &[vec![0, 1]]).unwrap(), 1.0);
    }
}
