//! TREC run and qrels export.
//!
//! trec_eval re-sorts a run by score and breaks ties on the document id,
//! so the exported score is derived from the rank (`limit - rank + 1`) to
//! keep our order intact.

use std::io::Write;

use crate::corpus::Instance;
use crate::error::Result;
use crate::eval::RunRow;

fn token(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join("_")
}

pub fn write_run<'a, W: Write, I: IntoIterator<Item = &'a RunRow>>(rows: I, tag: &str, mut w: W) -> Result<()> {
    for row in rows {
        let n = row.ranking.len();
        for (i, (item, _)) in row.ranking.iter().enumerate() {
            writeln!(w, "{} Q0 {} {} {} {}", token(&row.instance_id), token(item), i + 1, n - i, token(tag))?;
        }
    }
    Ok(())
}

pub fn write_qrels<W: Write>(instances: &[Instance], mut w: W) -> Result<()> {
    let mut sorted: Vec<&Instance> = instances.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    for inst in sorted {
        for item in &inst.relevant_items {
            writeln!(w, "{} 0 {} 1", token(&inst.instance_id), token(item))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_lines_have_decreasing_scores() {
        let row = RunRow {
            instance_id: "m 1".into(),
            method: "x".into(),
            query: vec![],
            query_length: 0,
            rr: 0.0,
            ndcg: 0.0,
            p5: 0.0,
            error: None,
            ranking: vec![("b".into(), 0.5), ("a".into(), 0.5)],
        };
        let mut buf = Vec::new();
        write_run([&row], "cnn", &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "m_1 Q0 b 1 2 cnn\nm_1 Q0 a 2 1 cnn\n");
    }
}
