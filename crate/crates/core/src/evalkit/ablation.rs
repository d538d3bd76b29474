use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::protocol::{meta_test, MetricsTable};
use crate::config::RunConfig;
use crate::dataspec::{ClassSplit, Dataset};
use crate::trainer::meta_train;
use crate::{Error, Result};

/// One study dimension of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    PromptLen,
    PromptPosition,
    GeneratorVariant,
    Fusion,
    MpgPlacement,
    Seed,
}

impl Axis {
    pub const STUDIES: [Axis; 5] = [
        Axis::PromptLen,
        Axis::PromptPosition,
        Axis::GeneratorVariant,
        Axis::Fusion,
        Axis::MpgPlacement,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.trim() {
            "prompt_len" => Axis::PromptLen,
            "prompt_position" => Axis::PromptPosition,
            "generator_variant" => Axis::GeneratorVariant,
            "fusion" => Axis::Fusion,
            "mpg_placement" => Axis::MpgPlacement,
            "seed" => Axis::Seed,
            other => return Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::PromptLen => "prompt_len",
            Axis::PromptPosition => "prompt_position",
            Axis::GeneratorVariant => "generator_variant",
            Axis::Fusion => "fusion",
            Axis::MpgPlacement => "mpg_placement",
            Axis::Seed => "seed",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Axis::PromptLen => "mpg.prompt_len",
            Axis::PromptPosition => "mpg.prompt_position",
            Axis::GeneratorVariant => "mpg.generator_variant",
            Axis::Fusion => "mpg.fusion",
            Axis::MpgPlacement => "mpg.placement",
            Axis::Seed => "seed",
        }
    }

    /// The values studied for this axis; empty for `seed`, which has no fixed set.
    pub fn standard_values(self) -> &'static [&'static str] {
        match self {
            Axis::PromptLen => &["2", "4", "8", "16"],
            Axis::PromptPosition => &["prefix", "suffix", "surround"],
            Axis::GeneratorVariant => &["one-layer", "two-layer", "pre-transformer", "post-transformer"],
            Axis::Fusion => &["addition", "multiplication", "concatenation"],
            Axis::MpgPlacement => &["rcnn-only", "rpn+rcnn", "none"],
            Axis::Seed => &[],
        }
    }

    fn check(self, value: &str) -> Result<()> {
        let ok = match self {
            Axis::Seed => value.parse::<u64>().is_ok(),
            _ => self.standard_values().contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("`{value}` is not a valid {} value", self.name())))
        }
    }
}

/// Axes with their values; cells are the cartesian product in axis order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axes: Vec<(Axis, Vec<String>)>,
}

impl AblationGrid {
    /// One axis at its standard values.
    pub fn standard(axis: Axis) -> Result<Self> {
        Self::new(vec![(
            axis,
            axis.standard_values().iter().map(|s| s.to_string()).collect(),
        )])
    }

    pub fn new(axes: Vec<(Axis, Vec<String>)>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Config("ablation grid has no axes".into()));
        }
        for (i, (axis, values)) in axes.iter().enumerate() {
            if values.is_empty() {
                return Err(Error::Config(format!("axis {} has no values", axis.name())));
            }
            if axes[..i].iter().any(|(a, _)| a == axis) {
                return Err(Error::Config(format!("axis {} given twice", axis.name())));
            }
            for v in values {
                axis.check(v)?;
            }
        }
        Ok(Self { axes })
    }

    /// `fusion` (standard values) or `fusion=addition,concatenation;seed=0,1`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
            match part.split_once('=') {
                None => {
                    let axis = Axis::parse(part)?;
                    if axis == Axis::Seed {
                        return Err(Error::Config("the seed axis needs explicit values".into()));
                    }
                    axes.push((axis, axis.standard_values().iter().map(|s| s.to_string()).collect()));
                }
                Some((name, values)) => axes.push((
                    Axis::parse(name)?,
                    values.split(',').map(|v| v.trim().to_string()).collect(),
                )),
            }
        }
        Self::new(axes)
    }

    pub fn cells(&self) -> Vec<Vec<(Axis, String)>> {
        let mut cells: Vec<Vec<(Axis, String)>> = vec![Vec::new()];
        for (axis, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((*axis, v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

pub struct AblationData<'a> {
    pub train: &'a Dataset,
    pub split: &'a ClassSplit,
    /// Where novel supports are drawn from at test time.
    pub pool: &'a Dataset,
    pub test: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub cell: Vec<(Axis, String)>,
    pub metrics: MetricsTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axes: Vec<Axis>,
    pub shots: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    fn columns(&self) -> Vec<String> {
        let mut cols = vec!["setting".to_string()];
        for &k in &self.shots {
            for m in ["AP", "AP50", "AP75"] {
                cols.push(if self.shots.len() == 1 { m.to_string() } else { format!("{m}@{k}") });
            }
        }
        cols
    }

    fn values(&self, row: &AblationRow) -> Vec<f64> {
        self.shots
            .iter()
            .flat_map(|&k| {
                let m = row.metrics.mean(k).expect("every shot has a mean row");
                [m.ap, m.ap50, m.ap75]
            })
            .collect()
    }

    /// One row per cell; metrics are seed means, in percent.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::parse("ablation csv", e);
        w.write_record(self.columns()).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.setting.clone()];
            rec.extend(self.values(r).iter().map(|v| format!("{:.2}", 100.0 * v)));
            w.write_record(rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("ablation csv", e))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Fixed-width text table.
    pub fn summary(&self) -> String {
        let cols = self.columns();
        let width = self.rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$}", cols[0]);
        for c in &cols[1..] {
            let _ = write!(s, " {c:>7}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<width$}", r.setting);
            for v in self.values(r) {
                let _ = write!(s, " {:>7.2}", 100.0 * v);
            }
            s.push('\n');
        }
        s
    }
}

fn setting_label(cell: &[(Axis, String)]) -> String {
    cell.iter()
        .map(|(a, v)| format!("{}={v}", a.name()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// The run configuration of one grid cell.
pub fn cell_config(base: &RunConfig, cell: &[(Axis, String)]) -> Result<RunConfig> {
    let overrides: Vec<String> = cell.iter().map(|(a, v)| format!("{}={v}", a.key())).collect();
    base.with_overrides(&overrides)
}

/// Meta-trains and meta-tests every cell. Evaluation shots and seeds come from
/// `base.eval` and are shared by all cells, so rows are paired comparisons.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &RunConfig,
    data: &AblationData,
    mut on_cell: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let cells = grid.cells();
    let configs = cells
        .iter()
        .map(|c| cell_config(base, c))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, cfg) in cells.into_iter().zip(configs) {
        let outcome = meta_train(data.train, data.split, &cfg, |_| {})?;
        let metrics = meta_test(
            &outcome.checkpoint,
            data.pool,
            data.test,
            data.split,
            &base.eval.shots,
            &base.eval.seeds,
        )?;
        let row = AblationRow {
            setting: setting_label(&cell),
            cell,
            metrics,
        };
        on_cell(&row);
        rows.push(row);
    }
    Ok(AblationReport {
        axes: grid.axes.iter().map(|(a, _)| *a).collect(),
        shots: base.eval.shots.clone(),
        rows,
    })
}
