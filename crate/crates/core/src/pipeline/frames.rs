use std::path::Path;

use crate::datamodel::FrameSequence;
use crate::error::{ensure, Error, Result};

use super::imageio::{load_image, save_image, IMAGE_EXTENSIONS};

/// Frame rate assumed when a frame directory has no `fps.txt`.
pub const DEFAULT_FPS: f64 = 25.0;

const FPS_FILE: &str = "fps.txt";

/// Reads every image in `dir` in file-name order. The rate comes from an
/// optional `fps.txt`.
pub fn load_frames(dir: &Path) -> Result<FrameSequence> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image {
            paths.push(path);
        }
    }
    ensure!(!paths.is_empty(), Argument, "no frames in {}", dir.display());
    paths.sort();
    let frames = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;

    let fps_path = dir.join(FPS_FILE);
    let fps = if fps_path.exists() {
        let text = std::fs::read_to_string(&fps_path).map_err(|e| Error::io(&fps_path, e))?;
        text.trim()
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("{}: {e}", fps_path.display())))?
    } else {
        log::warn!("{} has no {FPS_FILE}; assuming {DEFAULT_FPS} fps", dir.display());
        DEFAULT_FPS
    };
    FrameSequence::new(frames, fps)
}

/// Writes frames as `{id}.png` plus `fps.txt`.
pub fn write_frames(sequence: &FrameSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for frame in sequence.frames() {
        save_image(frame, &dir.join(format!("{}.png", frame.id())))?;
    }
    let path = dir.join(FPS_FILE);
    std::fs::write(&path, format!("{}\n", sequence.fps())).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Image;

    #[test]
    fn round_trip_keeps_order_and_rate() {
        let frames: Vec<Image> = (0..12)
            .map(|i| Image::filled(format!("{:04}", i + 1), 16, 16, i as f32 / 20.0).unwrap())
            .collect();
        let seq = FrameSequence::new(frames, 12.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_frames(&seq, dir.path()).unwrap();
        let back = load_frames(dir.path()).unwrap();
        assert_eq!(back.fps(), 12.5);
        let ids: Vec<&str> = back.frames().iter().map(|f| f.id()).collect();
        assert_eq!(ids, (1..=12).map(|i| format!("{i:04}")).collect::<Vec<_>>());
        for (a, b) in back.frames().iter().zip(seq.frames()) {
            assert!((a.pixels()[0] - b.pixels()[0]).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn missing_rate_defaults() {
        let dir = tempfile::tempdir().unwrap();
        save_image(&Image::filled("f", 16, 16, 0.5).unwrap(), &dir.path().join("f.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let seq = load_frames(dir.path()).unwrap();
        assert_eq!(seq.fps(), DEFAULT_FPS);
        assert_eq!(seq.len(), 1);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_frames(dir.path()).is_err());
        assert!(matches!(load_frames(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
