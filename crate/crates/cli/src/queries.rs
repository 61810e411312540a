//! Query files: one query per line, comma separated, raw ids as in the
//! interaction log. A first line whose time column is not numeric is a header.

use dspp::data::IdMap;
use dspp::{DsppError, Result};

pub struct ItemQuery {
    pub user: usize,
    /// Model time.
    pub time: f64,
}

pub struct TimeQuery {
    pub user: usize,
    pub item: usize,
    pub time: Option<f64>,
}

fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, line)| (i + 1, line.split(',').map(str::trim).collect::<Vec<_>>()))
        .filter(|(_, f)| !(f.len() == 1 && f[0].is_empty()) && !f[0].starts_with('#'))
}

fn parse_time(field: &str, line: usize, scale: f64) -> Result<f64> {
    let t: f64 = field.parse().map_err(|_| DsppError::Parse {
        line,
        msg: format!("timestamp `{field}` is not a number"),
    })?;
    if !t.is_finite() {
        return Err(DsppError::Parse {
            line,
            msg: "timestamp is not finite".into(),
        });
    }
    Ok(t / scale)
}

fn lookup(index: &std::collections::HashMap<&str, usize>, raw: &str, what: &str, line: usize) -> Result<usize> {
    index.get(raw).copied().ok_or_else(|| DsppError::Parse {
        line,
        msg: format!("{what} `{raw}` is unknown to the model"),
    })
}

/// `user,timestamp` lines in chronological order.
pub fn read_item_queries(text: &str, ids: &IdMap, scale: f64) -> Result<Vec<ItemQuery>> {
    let users = ids.user_index();
    let mut out: Vec<ItemQuery> = Vec::new();
    for (n, (line, f)) in rows(text).enumerate() {
        let header = !users.contains_key(f[0]) && f.get(1).is_some_and(|t| t.parse::<f64>().is_err());
        if n == 0 && header {
            continue;
        }
        let [user, time] = f[..] else {
            return Err(DsppError::Parse {
                line,
                msg: "expected user,timestamp".into(),
            });
        };
        let q = ItemQuery {
            user: lookup(&users, user, "user", line)?,
            time: parse_time(time, line, scale)?,
        };
        if out.last().is_some_and(|p| p.time > q.time) {
            return Err(DsppError::Unsorted(line));
        }
        out.push(q);
    }
    Ok(out)
}

/// `user,item[,timestamp]` lines. Without a timestamp the prediction starts
/// at the later of the two endpoints' last interactions in the history.
pub fn read_time_queries(text: &str, ids: &IdMap, scale: f64) -> Result<Vec<TimeQuery>> {
    let (users, items) = (ids.user_index(), ids.item_index());
    let mut out = Vec::new();
    for (n, (line, f)) in rows(text).enumerate() {
        let header = !users.contains_key(f[0]) && f.get(1).is_some_and(|v| !items.contains_key(v));
        if n == 0 && header {
            continue;
        }
        let (user, item, time) = match f[..] {
            [u, v] => (u, v, None),
            [u, v, t] => (u, v, Some(parse_time(t, line, scale)?)),
            _ => {
                return Err(DsppError::Parse {
                    line,
                    msg: "expected user,item[,timestamp]".into(),
                })
            }
        };
        out.push(TimeQuery {
            user: lookup(&users, user, "user", line)?,
            item: lookup(&items, item, "item", line)?,
            time,
        });
    }
    Ok(out)
}
