//! Background file appender. Callers hand over finished bytes; one thread
//! owns the file handles and does the writes, so slow disks stay off the
//! caller's path.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, sync_channel, Receiver, Sender, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;

/// Open handles kept before older ones are closed.
const MAX_OPEN: usize = 4;

enum Msg {
    Append(String, Vec<u8>),
    Flush(SyncSender<()>),
}

pub struct Appender {
    dir: PathBuf,
    tx: Option<Sender<Msg>>,
    failure: Arc<Mutex<Option<String>>>,
    worker: Option<JoinHandle<()>>,
}

impl Appender {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let (tx, rx) = channel();
        let failure = Arc::new(Mutex::new(None));
        let worker = {
            let (dir, failure) = (dir.clone(), failure.clone());
            std::thread::Builder::new()
                .name("appender".into())
                .spawn(move || run(&dir, rx, &failure))?
        };
        Ok(Self {
            dir,
            tx: Some(tx),
            failure,
            worker: Some(worker),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn check(&self) -> io::Result<()> {
        match self.failure.lock().as_ref() {
            Some(e) => Err(io::Error::other(e.clone())),
            None => Ok(()),
        }
    }

    /// Queue `bytes` for appending to `dir/name`. Reports an earlier write
    /// failure, if any.
    pub fn append(&self, name: &str, bytes: Vec<u8>) -> io::Result<()> {
        self.check()?;
        self.tx
            .as_ref()
            .expect("appender open")
            .send(Msg::Append(name.to_string(), bytes))
            .map_err(|_| io::Error::other("appender thread exited"))
    }

    /// Wait until everything queued so far has reached the files.
    pub fn flush(&self) -> io::Result<()> {
        let (ack, done) = sync_channel(1);
        self.tx
            .as_ref()
            .expect("appender open")
            .send(Msg::Flush(ack))
            .map_err(|_| io::Error::other("appender thread exited"))?;
        done.recv().map_err(|_| io::Error::other("appender thread exited"))?;
        self.check()
    }
}

impl Drop for Appender {
    fn drop(&mut self) {
        drop(self.tx.take());
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn run(dir: &Path, rx: Receiver<Msg>, failure: &Mutex<Option<String>>) {
    let mut open: HashMap<String, BufWriter<File>> = HashMap::new();
    let write = |open: &mut HashMap<String, BufWriter<File>>, name: String, bytes: &[u8]| -> io::Result<()> {
        if !open.contains_key(&name) {
            if open.len() >= MAX_OPEN {
                for (_, mut f) in open.drain() {
                    f.flush()?;
                }
            }
            let f = OpenOptions::new().create(true).append(true).open(dir.join(&name))?;
            open.insert(name.clone(), BufWriter::new(f));
        }
        open.get_mut(&name).expect("just opened").write_all(bytes)
    };
    let flush_all = |open: &mut HashMap<String, BufWriter<File>>| -> io::Result<()> {
        for f in open.values_mut() {
            f.flush()?;
        }
        Ok(())
    };
    let record = |r: io::Result<()>| {
        if let Err(e) = r {
            failure.lock().get_or_insert_with(|| e.to_string());
        }
    };
    while let Ok(first) = rx.recv() {
        let mut acks = Vec::new();
        let mut next = Some(first);
        // drain whatever is queued, then flush once
        while let Some(msg) = next {
            match msg {
                Msg::Append(name, bytes) => record(write(&mut open, name, &bytes)),
                Msg::Flush(ack) => acks.push(ack),
            }
            next = rx.try_recv().ok();
        }
        record(flush_all(&mut open));
        for ack in acks {
            let _ = ack.send(());
        }
    }
    record(flush_all(&mut open));
}
