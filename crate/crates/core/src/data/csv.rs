use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::network::{IdMap, Interaction, SideColumns, TemporalNetwork};
use crate::error::{DsppError, Result};

#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    /// Retain the label and feature columns on the network.
    pub keep_features: bool,
}

/// A parsed interaction log with its raw id mapping.
#[derive(Clone, Debug)]
pub struct ParsedLog {
    pub network: TemporalNetwork,
    pub ids: IdMap,
}

struct Row {
    user: String,
    item: String,
    time: f64,
    label: f64,
    features: Vec<f64>,
}

fn parse_row(line: &str, lineno: usize) -> Result<Row> {
    let err = |msg: String| DsppError::Parse { line: lineno, msg };
    let mut fields = line.split(',').map(str::trim);
    let user = fields.next().filter(|s| !s.is_empty());
    let item = fields.next().filter(|s| !s.is_empty());
    let time = fields.next();
    let (Some(user), Some(item), Some(time)) = (user, item, time) else {
        return Err(err("expected at least user,item,timestamp".into()));
    };
    let time: f64 = time
        .parse()
        .map_err(|_| err(format!("timestamp `{time}` is not a number")))?;
    if !time.is_finite() {
        return Err(err(format!("timestamp {time} is not finite")));
    }
    if time < 0.0 {
        return Err(err(format!("negative timestamp {time}")));
    }
    let label = match fields.next() {
        None | Some("") => 0.0,
        Some(s) => s.parse().map_err(|_| err(format!("label `{s}` is not a number")))?,
    };
    let features = fields
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| err(format!("feature `{s}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Row {
        user: user.to_string(),
        item: item.to_string(),
        time,
        label,
        features,
    })
}

/// Dense indices for raw ids: numeric order when every id is an integer,
/// otherwise order of first appearance.
fn densify<'a>(raw: impl Iterator<Item = &'a str> + Clone) -> (Vec<String>, HashMap<String, usize>) {
    let mut seen: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for s in raw {
        if !index.contains_key(s) {
            index.insert(s.to_string(), seen.len());
            seen.push(s.to_string());
        }
    }
    let numeric: Option<Vec<u64>> = seen.iter().map(|s| s.parse().ok()).collect();
    if let Some(nums) = numeric {
        let mut order: Vec<usize> = (0..seen.len()).collect();
        order.sort_by_key(|&i| nums[i]);
        seen = order.iter().map(|&i| seen[i].clone()).collect();
        index = seen.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }
    (seen, index)
}

/// Reads a JODIE-style log: `user,item,timestamp[,label[,features…]]`, one
/// interaction per line, with an optional header line.
pub fn parse_interactions<R: BufRead>(reader: R, opts: ParseOptions) -> Result<ParsedLog> {
    let mut rows = Vec::new();
    let mut first = true;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if std::mem::take(&mut first) {
            let third = line.split(',').nth(2).map(str::trim);
            if third.is_none_or(|s| s.parse::<f64>().is_err()) {
                continue;
            }
        }
        rows.push(parse_row(&line, lineno)?);
    }

    let width = rows.first().map_or(0, |r| r.features.len());
    if opts.keep_features {
        if let Some(k) = rows.iter().position(|r| r.features.len() != width) {
            return Err(DsppError::Parse {
                line: k + 1,
                msg: format!("expected {width} feature columns"),
            });
        }
    }

    let (users, user_index) = densify(rows.iter().map(|r| r.user.as_str()));
    let (items, item_index) = densify(rows.iter().map(|r| r.item.as_str()));
    let interactions = rows
        .iter()
        .map(|r| Interaction {
            user: user_index[&r.user],
            item: item_index[&r.item],
            time: r.time,
        })
        .collect();
    let side = opts.keep_features.then(|| SideColumns {
        labels: rows.iter().map(|r| r.label).collect(),
        width,
        features: rows.iter().flat_map(|r| r.features.iter().map(|&x| x as f32)).collect(),
    });
    let network = TemporalNetwork::with_side(users.len(), items.len(), interactions, side)?;
    Ok(ParsedLog {
        network,
        ids: IdMap { users, items },
    })
}

/// Re-indexes a parsed log onto an existing id mapping, as needed when
/// scoring new data with a trained model. Unknown ids are an error.
pub fn remap(log: &ParsedLog, target: &IdMap) -> Result<TemporalNetwork> {
    let users = target.user_index();
    let items = target.item_index();
    let xs = log
        .network
        .interactions()
        .iter()
        .map(|x| {
            let raw_u = &log.ids.users[x.user];
            let raw_i = &log.ids.items[x.item];
            let user = *users
                .get(raw_u.as_str())
                .ok_or_else(|| DsppError::InvalidArgument(format!("user `{raw_u}` is unknown to the model")))?;
            let item = *items
                .get(raw_i.as_str())
                .ok_or_else(|| DsppError::InvalidArgument(format!("item `{raw_i}` is unknown to the model")))?;
            Ok(Interaction {
                user,
                item,
                time: x.time,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TemporalNetwork::new(target.users.len(), target.items.len(), xs)
}

/// Writes the log back in the format accepted by [`parse_interactions`].
pub fn write_interactions<W: Write>(net: &TemporalNetwork, ids: &IdMap, mut out: W) -> Result<()> {
    writeln!(
        out,
        "user_id,item_id,timestamp,state_label,comma_separated_list_of_features"
    )?;
    let side = net.side_columns();
    for (k, x) in net.interactions().iter().enumerate() {
        write!(out, "{},{},{}", ids.users[x.user], ids.items[x.item], x.time)?;
        match side {
            Some(s) => {
                write!(out, ",{}", s.labels[k])?;
                for f in &s.features[k * s.width..(k + 1) * s.width] {
                    write!(out, ",{f}")?;
                }
            }
            None => write!(out, ",0")?,
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ParsedLog> {
        parse_interactions(s.as_bytes(), ParseOptions::default())
    }

    #[test]
    fn three_line_fixture() {
        let log = parse("u1,i1,0.0\nu2,i1,1.5\nu1,i2,3.0\n").unwrap();
        let n = &log.network;
        assert_eq!((n.users(), n.items(), n.len()), (2, 2, 3));
        assert_eq!(log.ids.users, vec!["u1", "u2"]);
        assert_eq!(n.interactions()[1].user, 1);
    }

    #[test]
    fn header_is_skipped_and_numeric_ids_sorted() {
        let log = parse("user_id,item_id,timestamp,state_label,f\n10,5,0,0,0.1\n2,3,1,0,0.2\n").unwrap();
        assert_eq!(log.ids.users, vec!["2", "10"]);
        assert_eq!(log.ids.items, vec!["3", "5"]);
        assert_eq!(log.network.interactions()[0].user, 1);
    }

    #[test]
    fn negative_timestamp_reports_line() {
        let err = parse("a,b,1\na,b,-2\n").unwrap_err();
        match err {
            DsppError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_rows_fail() {
        assert!(parse("a,b,1\na,b\n").is_err());
        assert!(parse("a,b,1\na,b,x\n").is_err());
        assert!(parse("a,b,1,0,q\n").is_err());
    }

    #[test]
    fn features_kept_on_request() {
        let src = "u,i,t,l,f1,f2\na,x,2,1,0.5,0.25\nb,y,1,0,1,2\n";
        let log = parse_interactions(src.as_bytes(), ParseOptions { keep_features: true }).unwrap();
        let side = log.network.side_columns().unwrap();
        assert_eq!(side.width, 2);
        assert_eq!(side.labels, vec![0.0, 1.0]);
        assert_eq!(side.features, vec![1.0, 2.0, 0.5, 0.25]);
        assert!(parse(src).unwrap().network.side_columns().is_none());
    }

    #[test]
    fn remap_onto_model_ids() {
        let train = parse("a,x,0\nb,y,1\n").unwrap();
        let new = parse("b,x,5\n").unwrap();
        let net = remap(&new, &train.ids).unwrap();
        assert_eq!(net.interactions()[0].user, 1);
        assert_eq!(net.interactions()[0].item, 0);
        assert!(remap(&parse("c,x,5\n").unwrap(), &train.ids).is_err());
    }

    #[test]
    fn write_then_parse_round_trips() {
        let log = parse("u1,i1,0.25\nu2,i1,1.5\nu1,i2,3\n").unwrap();
        let mut buf = Vec::new();
        write_interactions(&log.network, &log.ids, &mut buf).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.network, log.network);
        assert_eq!(back.ids, log.ids);
    }
}
