use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::manifest::Manifest;
use crate::error::{Error, Result};

pub const FRAME_MAGIC: [u8; 4] = *b"FSE1";
pub const PROMPT_MAGIC: [u8; 4] = *b"FSP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub class_id: u32,
    /// Row-major `T x C`.
    pub frames: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRecord {
    pub class_id: u32,
    /// Row-major `R x C`.
    pub templates: Vec<f32>,
}

/// Immutable frame and prompt embeddings. Cheap to share across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    frames: usize,
    channels: usize,
    templates: usize,
    videos: Vec<VideoRecord>,
    prompts: Vec<PromptRecord>,
    by_id: HashMap<String, usize>,
    by_class: HashMap<u32, usize>,
}

impl EmbeddingStore {
    pub fn new(
        frames: usize,
        channels: usize,
        templates: usize,
        videos: Vec<VideoRecord>,
        prompts: Vec<PromptRecord>,
    ) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(videos.len());
        for (i, v) in videos.iter().enumerate() {
            if v.frames.len() != frames * channels {
                return Err(Error::Data {
                    index: i,
                    message: format!("video {} holds {} values, expected {}", v.id, v.frames.len(), frames * channels),
                });
            }
            check_finite(&v.frames, i)?;
            if by_id.insert(v.id.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate video id {}", v.id)));
            }
        }
        let mut by_class = HashMap::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            if p.templates.len() != templates * channels {
                return Err(Error::Data {
                    index: i,
                    message: format!(
                        "class {} prompt block holds {} values, expected {}",
                        p.class_id,
                        p.templates.len(),
                        templates * channels
                    ),
                });
            }
            check_finite(&p.templates, i)?;
            if by_class.insert(p.class_id, i).is_some() {
                return Err(Error::Integrity(format!("duplicate prompt block for class {}", p.class_id)));
            }
        }
        Ok(Self { frames, channels, templates, videos, prompts, by_id, by_class })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn templates(&self) -> usize {
        self.templates
    }

    pub fn videos(&self) -> &[VideoRecord] {
        &self.videos
    }

    pub fn prompts(&self) -> &[PromptRecord] {
        &self.prompts
    }

    pub fn video(&self, id: &str) -> Result<&VideoRecord> {
        self.by_id
            .get(id)
            .map(|&i| &self.videos[i])
            .ok_or_else(|| Error::Lookup(format!("unknown video {id}")))
    }

    pub fn prompt(&self, class_id: u32) -> Result<&PromptRecord> {
        self.by_class
            .get(&class_id)
            .map(|&i| &self.prompts[i])
            .ok_or_else(|| Error::Lookup(format!("no prompts for class {class_id}")))
    }

    /// Cross-checks the store against a manifest.
    pub fn check_against(&self, manifest: &Manifest) -> Result<()> {
        if (self.frames, self.channels, self.templates) != (manifest.frames, manifest.channels, manifest.templates) {
            return Err(Error::Integrity(format!(
                "store shape T={} C={} R={} disagrees with manifest T={} C={} R={}",
                self.frames, self.channels, self.templates, manifest.frames, manifest.channels, manifest.templates
            )));
        }
        if self.videos.len() != manifest.videos.len() {
            return Err(Error::Integrity(format!(
                "frame container holds {} videos, manifest lists {}",
                self.videos.len(),
                manifest.videos.len()
            )));
        }
        if self.prompts.len() != manifest.classes.len() {
            return Err(Error::Integrity(format!(
                "prompt container holds {} classes, manifest lists {}",
                self.prompts.len(),
                manifest.classes.len()
            )));
        }
        for v in &manifest.videos {
            let rec = self
                .by_id
                .get(&v.id)
                .map(|&i| &self.videos[i])
                .ok_or_else(|| Error::Integrity(format!("video {} missing from frame container", v.id)))?;
            if rec.class_id != v.class_id {
                return Err(Error::Integrity(format!(
                    "video {} has class {} in the container but {} in the manifest",
                    v.id, rec.class_id, v.class_id
                )));
            }
        }
        for c in &manifest.classes {
            if !self.by_class.contains_key(&c.id) {
                return Err(Error::Integrity(format!("class {} missing from prompt container", c.id)));
            }
        }
        Ok(())
    }
}

fn check_finite(values: &[f32], index: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(Error::Data { index, message: format!("non-finite value {} at offset {k}", values[k]) }),
        None => Ok(()),
    }
}

/// Sum over the `R` template embeddings of a class.
pub fn aggregate_prompts(store: &EmbeddingStore, class_id: u32) -> Result<Vec<f32>> {
    let rec = store.prompt(class_id)?;
    let c = store.channels;
    let mut out = vec![0f32; c];
    for row in rec.templates.chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(out)
}

fn fmt_err(what: &str, e: std::io::Error) -> Error {
    Error::Format(format!("{what}: {e}"))
}

fn read_header<R: Read>(r: &mut R, magic: [u8; 4], what: &str) -> Result<[u32; 4]> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|e| fmt_err(what, e))?;
    if m != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut h = [0u32; 4];
    for v in &mut h {
        *v = r.read_u32::<LittleEndian>().map_err(|e| fmt_err(what, e))?;
    }
    if h[0] != FORMAT_VERSION {
        return Err(Error::Format(format!("{what}: unsupported version {}", h[0])));
    }
    Ok(h)
}

fn read_floats<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out).map_err(|e| fmt_err(what, e))?;
    Ok(out)
}

fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::Integrity(format!("{what}: trailing bytes after the declared records"))),
        Err(e) => Err(fmt_err(what, e)),
    }
}

/// Reads an FSE1 frame container. Returns `(T, C, records)`.
pub fn read_frames<R: Read>(mut r: R) -> Result<(usize, usize, Vec<VideoRecord>)> {
    let what = "frame container";
    let [_, count, t, c] = read_header(&mut r, FRAME_MAGIC, what)?;
    let (t, c) = (t as usize, c as usize);
    let mut videos = Vec::with_capacity(count as usize);
    for index in 0..count as usize {
        let len = r.read_u16::<LittleEndian>().map_err(|e| {
            Error::Integrity(format!("{what}: header declares {count} videos but record {index} is missing ({e})"))
        })?;
        let mut id = vec![0u8; len as usize];
        r.read_exact(&mut id).map_err(|e| fmt_err(what, e))?;
        let id = String::from_utf8(id)
            .map_err(|_| Error::Data { index, message: "video id is not valid UTF-8".into() })?;
        let class_id = r.read_u32::<LittleEndian>().map_err(|e| fmt_err(what, e))?;
        let frames = read_floats(&mut r, t * c, what)?;
        check_finite(&frames, index)?;
        videos.push(VideoRecord { id, class_id, frames });
    }
    expect_eof(&mut r, what)?;
    Ok((t, c, videos))
}

/// Reads an FSP1 prompt container. Returns `(R, C, records)`.
pub fn read_prompts<R: Read>(mut r: R) -> Result<(usize, usize, Vec<PromptRecord>)> {
    let what = "prompt container";
    let [_, count, rr, c] = read_header(&mut r, PROMPT_MAGIC, what)?;
    let (rr, c) = (rr as usize, c as usize);
    let mut prompts = Vec::with_capacity(count as usize);
    for index in 0..count as usize {
        let class_id = r.read_u32::<LittleEndian>().map_err(|e| {
            Error::Integrity(format!("{what}: header declares {count} classes but record {index} is missing ({e})"))
        })?;
        let templates = read_floats(&mut r, rr * c, what)?;
        check_finite(&templates, index)?;
        prompts.push(PromptRecord { class_id, templates });
    }
    expect_eof(&mut r, what)?;
    Ok((rr, c, prompts))
}

fn count_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

pub fn write_frames<W: Write>(mut w: W, store: &EmbeddingStore) -> Result<()> {
    let io = |e| fmt_err("frame container", e);
    w.write_all(&FRAME_MAGIC).map_err(io)?;
    for v in [
        FORMAT_VERSION,
        count_u32(store.videos.len(), "video count")?,
        count_u32(store.frames, "T")?,
        count_u32(store.channels, "C")?,
    ] {
        w.write_u32::<LittleEndian>(v).map_err(io)?;
    }
    for v in &store.videos {
        let len = u16::try_from(v.id.len())
            .map_err(|_| Error::Format(format!("video id {} longer than 65535 bytes", v.id)))?;
        w.write_u16::<LittleEndian>(len).map_err(io)?;
        w.write_all(v.id.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(v.class_id).map_err(io)?;
        for &x in &v.frames {
            w.write_f32::<LittleEndian>(x).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_prompts<W: Write>(mut w: W, store: &EmbeddingStore) -> Result<()> {
    let io = |e| fmt_err("prompt container", e);
    w.write_all(&PROMPT_MAGIC).map_err(io)?;
    for v in [
        FORMAT_VERSION,
        count_u32(store.prompts.len(), "class count")?,
        count_u32(store.templates, "R")?,
        count_u32(store.channels, "C")?,
    ] {
        w.write_u32::<LittleEndian>(v).map_err(io)?;
    }
    for p in &store.prompts {
        w.write_u32::<LittleEndian>(p.class_id).map_err(io)?;
        for &x in &p.templates {
            w.write_f32::<LittleEndian>(x).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn write_store(
    frame_path: &Path,
    prompt_path: &Path,
    manifest_path: &Path,
    manifest: &Manifest,
    store: &EmbeddingStore,
) -> Result<()> {
    manifest.validate()?;
    store.check_against(manifest)?;
    write_frames(create(frame_path)?, store)?;
    write_prompts(create(prompt_path)?, store)?;
    std::fs::write(manifest_path, manifest.to_json()).map_err(|e| Error::io(manifest_path, e))
}

pub fn read_store(frame_path: &Path, prompt_path: &Path, manifest_path: &Path) -> Result<(Manifest, EmbeddingStore)> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::from_json(&text)?;
    manifest.validate()?;
    let (t, c, videos) = read_frames(open(frame_path)?)?;
    let (r, c2, prompts) = read_prompts(open(prompt_path)?)?;
    if c != c2 {
        return Err(Error::Integrity(format!("frame container has C={c} but prompt container has C={c2}")));
    }
    let store = EmbeddingStore::new(t, c, r, videos, prompts)?;
    store.check_against(&manifest)?;
    Ok((manifest, store))
}
