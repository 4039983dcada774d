//! Query-log ingestion: TSV parsing, click-through collapse, session
//! segmentation on the 30-minute rule, relevance filtering, and bot
//! flagging.
//!
//! Two sessionization paths share the same per-user logic: an in-memory one
//! for data that fits, and an externally partitioned one that spills records
//! to per-partition temp files keyed by a stable hash of the user id, so
//! multi-gigabyte logs sessionize in bounded memory. Both emit sessions in
//! (user, ordinal) order and produce identical output.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate};

use crate::error::{Error, Result};
use crate::interpret::{InterpretedSession, Lemmatizer};
use crate::ontology::Ontology;

/// Expected header of an AOL-format log file.
pub const LOG_HEADER: &str = "AnonID\tQuery\tQueryTime\tItemRank\tClickURL";

/// Two consecutive queries more than this far apart start a new session.
pub const SESSION_GAP_SECS: i64 = 1800;

/// One line of the log: a query or a click-through repetition of one.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub anon_id: String,
    pub query: String,
    /// Epoch seconds (timestamps have second resolution).
    pub query_time: i64,
    pub item_rank: Option<f64>,
    pub click_url: Option<String>,
}

/// A line that could not be parsed; counted and skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

/// Parse `YYYY-MM-DD HH:MM:SS` to epoch seconds.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let bytes = s.as_bytes();
    if bytes.len() != 19 || bytes[4] != b'-' || bytes[7] != b'-' || bytes[10] != b' ' {
        return None;
    }
    let num = |range: std::ops::Range<usize>| -> Option<u32> {
        let mut v: u32 = 0;
        for &b in &bytes[range] {
            if !b.is_ascii_digit() {
                return None;
            }
            v = v * 10 + u32::from(b - b'0');
        }
        Some(v)
    };
    if bytes[13] != b':' || bytes[16] != b':' {
        return None;
    }
    let date = NaiveDate::from_ymd_opt(num(0..4)? as i32, num(5..7)?, num(8..10)?)?;
    let time = date.and_hms_opt(num(11..13)?, num(14..16)?, num(17..19)?)?;
    Some(time.and_utc().timestamp())
}

/// Format epoch seconds back to `YYYY-MM-DD HH:MM:SS`.
pub fn format_timestamp(secs: i64) -> String {
    DateTime::from_timestamp(secs, 0)
        .expect("timestamp in range")
        .naive_utc()
        .format("%Y-%m-%d %H:%M:%S")
        .to_string()
}

/// Streaming log parser. Yields records in file order; malformed lines come
/// back as recoverable `LineIssue`s.
pub struct LogParser<R> {
    reader: R,
    line_no: usize,
    buf: String,
}

impl LogParser<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        Ok(LogParser::new(BufReader::new(file)))
    }
}

impl<R: BufRead> LogParser<R> {
    pub fn new(reader: R) -> Self {
        LogParser {
            reader,
            line_no: 0,
            buf: String::new(),
        }
    }

    fn parse_line(line: &str, line_no: usize) -> std::result::Result<LogRecord, LineIssue> {
        let issue = |message: &str| LineIssue {
            line: line_no,
            message: message.to_owned(),
        };
        let mut fields = line.split('\t');
        let anon_id = fields.next().unwrap_or("");
        let query = fields.next().ok_or_else(|| issue("missing Query field"))?;
        let time = fields
            .next()
            .ok_or_else(|| issue("missing QueryTime field"))?;
        let item_rank = fields.next();
        let click_url = fields.next();
        if fields.next().is_some() {
            return Err(issue("too many fields"));
        }
        if anon_id.is_empty() {
            return Err(issue("empty AnonID"));
        }
        let query_time =
            parse_timestamp(time).ok_or_else(|| issue("unparseable QueryTime"))?;
        let item_rank = match item_rank {
            None | Some("") => None,
            Some(r) => Some(
                r.parse::<f64>()
                    .map_err(|_| issue("unparseable ItemRank"))?,
            ),
        };
        let click_url = match click_url {
            None | Some("") => None,
            Some(u) => Some(u.to_owned()),
        };
        Ok(LogRecord {
            anon_id: anon_id.to_owned(),
            query: query.to_owned(),
            query_time,
            item_rank,
            click_url,
        })
    }
}

impl<R: BufRead> Iterator for LogParser<R> {
    type Item = std::result::Result<LogRecord, LineIssue>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.line_no += 1;
                    return Some(Err(LineIssue {
                        line: self.line_no,
                        message: format!("read error: {e}"),
                    }));
                }
            }
            self.line_no += 1;
            let line = self.buf.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            if self.line_no == 1 && line == LOG_HEADER {
                continue;
            }
            return Some(LogParser::<R>::parse_line(line, self.line_no));
        }
    }
}

/// One query of a session after click-through collapse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionQuery {
    pub time: i64,
    pub text: String,
}

/// A maximal run of one user's queries with inter-query gaps of at most 30
/// minutes. Consecutive identical (text, timestamp) pairs are collapsed to
/// one query; `raw_len` counts the records before collapsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user: String,
    /// 0-based ordinal of this session within the user's sessions.
    pub ordinal: u32,
    pub queries: Vec<SessionQuery>,
    pub raw_len: usize,
}

impl Session {
    pub fn start(&self) -> i64 {
        self.queries.first().map(|q| q.time).unwrap_or(0)
    }

    pub fn end(&self) -> i64 {
        self.queries.last().map(|q| q.time).unwrap_or(0)
    }

    pub fn duration_secs(&self) -> i64 {
        self.end() - self.start()
    }
}

/// Split one user's time-ordered records into sessions and collapse
/// duplicates. `records` must already be stably sorted by time.
fn split_user_sessions(user: &str, records: &[(i64, String)]) -> Vec<Session> {
    let mut sessions = Vec::new();
    let mut run_start = 0;
    for i in 1..=records.len() {
        let boundary = i == records.len()
            || records[i].0 - records[i - 1].0 > SESSION_GAP_SECS;
        if !boundary {
            continue;
        }
        let run = &records[run_start..i];
        let mut queries: Vec<SessionQuery> = Vec::new();
        for (time, text) in run {
            let dup = queries
                .last()
                .is_some_and(|prev| prev.time == *time && prev.text == *text);
            if !dup {
                queries.push(SessionQuery {
                    time: *time,
                    text: text.clone(),
                });
            }
        }
        sessions.push(Session {
            user: user.to_owned(),
            ordinal: sessions.len() as u32,
            queries,
            raw_len: run.len(),
        });
        run_start = i;
    }
    sessions
}

/// Group records by user, stable-sort each user's records by time (ties keep
/// input order), and segment into sessions. Output is ordered by
/// (user, ordinal).
pub fn sessionize<I>(records: I) -> Vec<Session>
where
    I: IntoIterator<Item = LogRecord>,
{
    let mut by_user: HashMap<String, Vec<(i64, String)>> = HashMap::new();
    for rec in records {
        by_user
            .entry(rec.anon_id)
            .or_default()
            .push((rec.query_time, rec.query));
    }
    let mut users: Vec<String> = by_user.keys().cloned().collect();
    users.sort_unstable();
    let mut sessions = Vec::new();
    for user in users {
        let mut records = by_user.remove(&user).unwrap();
        records.sort_by_key(|(t, _)| *t);
        sessions.extend(split_user_sessions(&user, &records));
    }
    sessions
}

/// Limits above which a single session marks its user as a likely bot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BotLimits {
    /// Raw records (queries plus click-through repetitions) in one session.
    pub max_raw_records: usize,
    /// Session duration in seconds.
    pub max_duration_secs: i64,
}

impl Default for BotLimits {
    fn default() -> Self {
        BotLimits {
            max_raw_records: 20_000,
            max_duration_secs: 6 * 86_400,
        }
    }
}

impl BotLimits {
    pub fn flags(&self, session: &Session) -> bool {
        session.raw_len > self.max_raw_records
            || session.duration_secs() > self.max_duration_secs
    }
}

/// Users with at least one session exceeding the limits.
pub fn bot_flags<'a, I>(sessions: I, limits: &BotLimits) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a Session>,
{
    sessions
        .into_iter()
        .filter(|s| limits.flags(s))
        .map(|s| s.user.clone())
        .collect()
}

/// True when at least one query of the session references a concept.
pub fn session_is_relevant(
    session: &Session,
    ontology: &Ontology,
    lemmatizer: &Lemmatizer,
) -> bool {
    InterpretedSession::new(ontology, lemmatizer, session).is_relevant()
}

/// Keep only sessions with at least one query referencing a concept. Whole
/// sessions are kept or dropped, never individual queries.
pub fn filter_relevant<I>(
    sessions: I,
    ontology: &Ontology,
    lemmatizer: &Lemmatizer,
) -> Vec<Session>
where
    I: IntoIterator<Item = Session>,
{
    sessions
        .into_iter()
        .filter(|s| session_is_relevant(s, ontology, lemmatizer))
        .collect()
}

/// Counters reported by the streaming sessionizer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionizeStats {
    pub lines_read: usize,
    pub records: usize,
    pub skipped_lines: usize,
    pub users: usize,
    pub sessions_emitted: usize,
    pub sessions_filtered_out: usize,
    pub flagged_bot_users: BTreeSet<String>,
    pub bot_sessions_dropped: usize,
}

/// Options for [`sessionize_file`].
pub struct SessionizeOptions<'a> {
    /// Number of hash partitions the record stream is spilled into. Memory
    /// use is proportional to the largest partition.
    pub partitions: usize,
    pub bot_limits: BotLimits,
    /// Drop all sessions of flagged users instead of just reporting them.
    pub exclude_bots: bool,
    /// When set, drop sessions with no concept-referencing query.
    pub relevance: Option<(&'a Ontology, &'a Lemmatizer)>,
}

impl Default for SessionizeOptions<'_> {
    fn default() -> Self {
        SessionizeOptions {
            partitions: 64,
            bot_limits: BotLimits::default(),
            exclude_bots: false,
            relevance: None,
        }
    }
}

/// FNV-1a; stable across runs and platforms, unlike the std hasher.
fn partition_of(user: &str, partitions: usize) -> usize {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in user.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (hash % partitions as u64) as usize
}

/// Sessionize a log file in bounded memory and stream the sessions, in
/// (user, ordinal) order, to `on_session`.
///
/// Records are spilled to per-partition temp files by user hash; each
/// partition is then sessionized independently and the per-partition outputs
/// are merged back into global user order.
pub fn sessionize_file(
    log_path: impl AsRef<Path>,
    options: &SessionizeOptions,
    mut on_session: impl FnMut(&Session) -> Result<()>,
) -> Result<SessionizeStats> {
    let partitions = options.partitions.max(1);
    let mut stats = SessionizeStats::default();

    let spill_dir = tempfile::tempdir()?;
    let mut writers: Vec<BufWriter<File>> = (0..partitions)
        .map(|p| {
            let path = spill_dir.path().join(format!("part-{p:04}.tsv"));
            Ok(BufWriter::new(File::create(path)?))
        })
        .collect::<Result<_>>()?;

    for item in LogParser::open(log_path.as_ref())? {
        stats.lines_read += 1;
        match item {
            Ok(rec) => {
                stats.records += 1;
                let p = partition_of(&rec.anon_id, partitions);
                writeln!(
                    writers[p],
                    "{}\t{}\t{}",
                    rec.anon_id, rec.query_time, rec.query
                )?;
            }
            Err(_) => stats.skipped_lines += 1,
        }
    }
    for w in &mut writers {
        w.flush()?;
    }
    drop(writers);

    // Sessionize each partition, spooling its sessions to a session file.
    let mut session_paths = Vec::with_capacity(partitions);
    for p in 0..partitions {
        let in_path = spill_dir.path().join(format!("part-{p:04}.tsv"));
        let out_path = spill_dir.path().join(format!("sess-{p:04}.tsv"));
        let mut by_user: HashMap<String, Vec<(i64, String)>> = HashMap::new();
        for line in BufReader::new(File::open(&in_path)?).lines() {
            let line = line?;
            let mut fields = line.splitn(3, '\t');
            let (Some(user), Some(time), Some(query)) =
                (fields.next(), fields.next(), fields.next())
            else {
                continue;
            };
            let time: i64 = time.parse().map_err(|_| {
                Error::validation(format!("corrupt spill record in partition {p}"))
            })?;
            by_user
                .entry(user.to_owned())
                .or_default()
                .push((time, query.to_owned()));
        }
        std::fs::remove_file(&in_path)?;

        let mut users: Vec<String> = by_user.keys().cloned().collect();
        users.sort_unstable();
        stats.users += users.len();
        let mut out = BufWriter::new(File::create(&out_path)?);
        for user in users {
            let mut records = by_user.remove(&user).unwrap();
            records.sort_by_key(|(t, _)| *t);
            let sessions = split_user_sessions(&user, &records);
            let flagged = sessions.iter().any(|s| options.bot_limits.flags(s));
            if flagged {
                stats.flagged_bot_users.insert(user.clone());
                if options.exclude_bots {
                    stats.bot_sessions_dropped += sessions.len();
                    continue;
                }
            }
            for session in &sessions {
                if let Some((ont, lem)) = options.relevance {
                    if !session_is_relevant(session, ont, lem) {
                        stats.sessions_filtered_out += 1;
                        continue;
                    }
                }
                write_session(&mut out, session)?;
            }
        }
        out.flush()?;
        session_paths.push(out_path);
    }

    // Merge the per-partition session files back into user order. Partitions
    // hold disjoint user sets, so a heap over each reader's next session key
    // restores the global (user, ordinal) order.
    let mut readers: Vec<SessionFileReader<BufReader<File>>> = session_paths
        .iter()
        .map(|p| Ok(SessionFileReader::new(BufReader::new(File::open(p)?))))
        .collect::<Result<_>>()?;
    let mut heap: BinaryHeap<Reverse<(String, u32, usize)>> = BinaryHeap::new();
    let mut pending: Vec<Option<Session>> = Vec::with_capacity(readers.len());
    for (i, r) in readers.iter_mut().enumerate() {
        let next = r.next_session()?;
        if let Some(s) = &next {
            heap.push(Reverse((s.user.clone(), s.ordinal, i)));
        }
        pending.push(next);
    }
    while let Some(Reverse((_, _, i))) = heap.pop() {
        let session = pending[i].take().expect("pending session");
        stats.sessions_emitted += 1;
        on_session(&session)?;
        let next = readers[i].next_session()?;
        if let Some(s) = &next {
            heap.push(Reverse((s.user.clone(), s.ordinal, i)));
        }
        pending[i] = next;
    }
    Ok(stats)
}

/// Write one session in the session-file format:
/// `user<TAB>ordinal<TAB>time<TAB>query`, one line per query.
pub fn write_session<W: Write>(w: &mut W, session: &Session) -> io::Result<()> {
    for q in &session.queries {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            session.user,
            session.ordinal,
            format_timestamp(q.time),
            q.text
        )?;
    }
    Ok(())
}

pub fn write_sessions<'a, W, I>(w: &mut W, sessions: I) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Session>,
{
    for s in sessions {
        write_session(w, s)?;
    }
    Ok(())
}

/// Incremental reader for the session-file format: groups consecutive lines
/// sharing (user, ordinal) into one session.
struct SessionFileReader<R> {
    lines: std::iter::Peekable<io::Lines<R>>,
    line_no: usize,
}

impl<R: BufRead> SessionFileReader<R> {
    fn new(reader: R) -> Self {
        SessionFileReader {
            lines: reader.lines().peekable(),
            line_no: 0,
        }
    }

    fn next_session(&mut self) -> Result<Option<Session>> {
        let mut current: Option<Session> = None;
        loop {
            let Some(peeked) = self.lines.peek() else {
                return Ok(current);
            };
            let line = match peeked {
                Ok(l) => l.clone(),
                Err(_) => {
                    // Consume to surface the io error.
                    let err = self.lines.next().unwrap().unwrap_err();
                    return Err(err.into());
                }
            };
            self.line_no += 1;
            let n = self.line_no;
            let mut fields = line.splitn(4, '\t');
            let (Some(user), Some(ordinal), Some(time), Some(text)) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::format("<sessions>", n, "expected 4 tab-separated fields"));
            };
            let ordinal: u32 = ordinal
                .parse()
                .map_err(|_| Error::format("<sessions>", n, "bad session ordinal"))?;
            let time = parse_timestamp(time)
                .ok_or_else(|| Error::format("<sessions>", n, "bad timestamp"))?;
            if let Some(s) = &current {
                if s.user != user || s.ordinal != ordinal {
                    // Belongs to the next session; leave it peeked.
                    self.line_no -= 1;
                    return Ok(current);
                }
            }
            let session = current.get_or_insert_with(|| Session {
                user: user.to_owned(),
                ordinal,
                queries: Vec::new(),
                raw_len: 0,
            });
            session.queries.push(SessionQuery {
                time,
                text: text.to_owned(),
            });
            session.raw_len += 1;
            self.lines.next();
        }
    }
}

/// Read a whole session file.
pub fn read_sessions(path: impl AsRef<Path>) -> Result<Vec<Session>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = SessionFileReader::new(BufReader::new(file));
    let mut sessions = Vec::new();
    while let Some(s) = reader.next_session()? {
        sessions.push(s);
    }
    Ok(sessions)
}
