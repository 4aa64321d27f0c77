//! Set operations on circuits.
//!
//! Mask algebra is symmetric; union is not, because pruned sites take the
//! ablation values bound to the first operand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::exact_match;
use crate::masking::{Circuit, Composition};
use crate::model::{EncodedSample, HardMask, TransformerModel};
use crate::tensor::Real;

fn check_pair(c1: &Circuit, c2: &Circuit) -> Result<()> {
    if c1.mask.len() != c2.mask.len() || c1.site_map != c2.site_map {
        return Err(Error::SiteMapMismatch(format!(
            "{} ({} sites) vs {} ({} sites)",
            c1.site_map,
            c1.mask.len(),
            c2.site_map,
            c2.mask.len()
        )));
    }
    if c1.model_hash != c2.model_hash {
        return Err(Error::SiteMapMismatch("circuits belong to different models".into()));
    }
    Ok(())
}

fn combine(c1: &Circuit, c2: &Circuit, op: &str, f: impl Fn(bool, bool) -> bool) -> Circuit {
    Circuit {
        mask: c1.mask.iter().zip(&c2.mask).map(|(&a, &b)| f(a, b)).collect(),
        ablation: c1.ablation.clone(),
        task: format!("{}({},{})", op, c1.task, c2.task),
        model_hash: c1.model_hash.clone(),
        site_map: c1.site_map.clone(),
        train_spec: None,
        composition: Some(Composition {
            op: op.to_string(),
            parents: vec![c1.task.clone(), c2.task.clone()],
        }),
    }
}

/// `m1 ∧ m2`, ablation from `c1`.
pub fn intersect(c1: &Circuit, c2: &Circuit) -> Result<Circuit> {
    check_pair(c1, c2)?;
    Ok(combine(c1, c2, "intersect", |a, b| a && b))
}

/// `m1 ∨ m2`; sites pruned in both keep `c1`'s ablation values.
pub fn union(c1: &Circuit, c2: &Circuit) -> Result<Circuit> {
    check_pair(c1, c2)?;
    if c1.ablation.kind != c2.ablation.kind {
        return Err(Error::AblationKindMismatch(c1.ablation.kind.to_string(), c2.ablation.kind.to_string()));
    }
    Ok(combine(c1, c2, "union", |a, b| a || b))
}

/// Accuracy of circuits (rows) on tasks (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeGrid {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub accuracy: Vec<Vec<f64>>,
}

impl CompositeGrid {
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.cols.iter().position(|c| c == col)?;
        Some(self.accuracy[i][j])
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let run = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
            let mut head = vec!["circuit".to_string()];
            head.extend(self.cols.iter().cloned());
            w.write_record(&head)?;
            for (r, row) in self.rows.iter().zip(&self.accuracy) {
                let mut rec = vec![r.clone()];
                rec.extend(row.iter().map(|v| format!("{:.6}", v)));
                w.write_record(&rec)?;
            }
            Ok(())
        };
        run(&mut w).map_err(|e| Error::Format(e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// For each pair, both base circuits and both orders of their union, each
/// decoded greedily on every task. Duplicate rows are emitted once.
pub fn evaluate_composite_grid<T: Real>(
    model: &TransformerModel<T>,
    pairs: &[(&Circuit, &Circuit)],
    tasks: &[(String, Vec<EncodedSample>)],
    batch_size: usize,
) -> Result<CompositeGrid> {
    let mut circuits: Vec<Circuit> = Vec::new();
    let mut push = |c: Circuit| {
        if !circuits.iter().any(|x| x.mask == c.mask && x.ablation == c.ablation) {
            circuits.push(c);
        }
    };
    for (a, b) in pairs {
        push((*a).clone());
        push((*b).clone());
        push(union(a, b)?);
        push(union(b, a)?);
    }
    let mut accuracy = Vec::with_capacity(circuits.len());
    for c in &circuits {
        c.check_bound(model)?;
        let fill = c.ablation.fill::<T>();
        let hook = HardMask::new(&c.mask, &fill, model.config.d_model)?;
        let row = tasks
            .iter()
            .map(|(_, data)| exact_match(model, &hook, data, batch_size))
            .collect::<Result<Vec<_>>>()?;
        accuracy.push(row);
    }
    Ok(CompositeGrid {
        rows: circuits.iter().map(|c| c.task.clone()).collect(),
        cols: tasks.iter().map(|(t, _)| t.clone()).collect(),
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{AblationKind, AblationSpec};

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    fn circuit(task: &str, mask: &str, ablation: AblationSpec) -> Circuit {
        Circuit {
            mask: bits(mask),
            ablation,
            task: task.into(),
            model_hash: "h".into(),
            site_map: "map".into(),
            train_spec: None,
            composition: None,
        }
    }

    fn mean(values: Vec<f32>, task: &str) -> AblationSpec {
        AblationSpec {
            kind: AblationKind::Mean,
            values,
            task: Some(task.into()),
            dataset_hash: None,
        }
    }

    #[test]
    fn bitwise_examples() {
        let a = circuit("a", "1100", AblationSpec::zero(4));
        let b = circuit("b", "1010", AblationSpec::zero(4));
        assert_eq!(intersect(&a, &b).unwrap().mask, bits("1000"));
        assert_eq!(union(&a, &b).unwrap().mask, bits("1110"));
        assert_eq!(intersect(&a, &a).unwrap().mask, a.mask);
        let ones = circuit("all", "1111", AblationSpec::zero(4));
        assert_eq!(intersect(&ones, &a).unwrap().mask, a.mask);
        let u = union(&a, &b).unwrap();
        assert_eq!(u.task, "union(a,b)");
        assert_eq!(u.composition.unwrap().parents, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn union_binds_first_operand_ablation() {
        let a = circuit("a", "1100", mean(vec![1.0, 2.0, 3.0, 4.0], "a"));
        let b = circuit("b", "0011", mean(vec![5.0, 6.0, 7.0, 8.0], "b"));
        let ab = union(&a, &b).unwrap();
        let ba = union(&b, &a).unwrap();
        assert_eq!(ab.mask, ba.mask);
        assert_eq!(ab.ablation, a.ablation);
        assert_eq!(ba.ablation, b.ablation);
        let aa = union(&a, &a).unwrap();
        assert_eq!((aa.mask, aa.ablation), (a.mask.clone(), a.ablation.clone()));
    }

    #[test]
    fn incompatible_operands_are_rejected() {
        let a = circuit("a", "1100", AblationSpec::zero(4));
        let m = circuit("m", "0011", mean(vec![0.0; 4], "m"));
        assert!(matches!(union(&a, &m), Err(Error::AblationKindMismatch(_, _))));
        let short = circuit("s", "110", AblationSpec::zero(3));
        assert!(matches!(intersect(&a, &short), Err(Error::SiteMapMismatch(_))));
        let mut other = a.clone();
        other.model_hash = "g".into();
        assert!(matches!(union(&a, &other), Err(Error::SiteMapMismatch(_))));
    }
}
